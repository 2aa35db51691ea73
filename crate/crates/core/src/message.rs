//! Cross-task message passing.
//!
//! Complete graph: every task node reads, at each step, an attention-weighted
//! sum of the other task encoders' hidden states. Star graph: one shared
//! encoder (the virtual node) runs over the sentence and each task node reads
//! from all of its positions with attention.
//!
//! Scores are additive: `s = u · tanh(W [x_t; h_{t-1}; m])` for a candidate
//! message `m`. `W` is stored as its three column blocks `w_x`, `w_h`, `w_m`
//! so the candidate projection can be batched over all candidates at once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{run_sequence, Cell, LstmParams, LstmState};
use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommMode {
    /// No communication: each task is a plain LSTM.
    Single,
    /// Complete graph, direct task-to-task attention.
    Cg,
    /// Star graph through a shared virtual-node encoder.
    Sg,
}

impl fmt::Display for CommMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommMode::Single => "single",
            CommMode::Cg => "cg",
            CommMode::Sg => "sg",
        })
    }
}

impl FromStr for CommMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(CommMode::Single),
            "cg" => Ok(CommMode::Cg),
            "sg" => Ok(CommMode::Sg),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected single, cg or sg)"))),
        }
    }
}

/// Task nodes plus, in star mode, the virtual node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskGraph {
    mode: CommMode,
    tasks: usize,
}

impl TaskGraph {
    pub fn new(mode: CommMode, tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("task graph needs at least one task".into()));
        }
        if mode == CommMode::Cg && tasks < 2 {
            return Err(Error::Config(format!(
                "complete-graph mode needs at least 2 tasks, got {tasks}"
            )));
        }
        Ok(TaskGraph { mode, tasks })
    }

    pub fn mode(&self) -> CommMode {
        self.mode
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks
    }

    pub fn has_virtual_node(&self) -> bool {
        self.mode == CommMode::Sg
    }

    /// Tasks sending messages to `target`, in id order.
    pub fn sources(&self, target: usize) -> Vec<usize> {
        match self.mode {
            CommMode::Cg => (0..self.tasks).filter(|&i| i != target).collect(),
            _ => Vec::new(),
        }
    }

    /// Directed edges `(from, to)`; the virtual node is id `num_tasks`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        match self.mode {
            CommMode::Single => Vec::new(),
            CommMode::Cg => (0..self.tasks)
                .flat_map(|k| self.sources(k).into_iter().map(move |i| (i, k)))
                .collect(),
            CommMode::Sg => (0..self.tasks).map(|k| (self.tasks, k)).collect(),
        }
    }
}

/// `u` (1×a) and the blocks of `W` (a×(d+2h)) for one attention reader.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub u: Var,
    pub w_x: Var,
    pub w_h: Var,
    pub w_m: Var,
}

impl AttentionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        attn: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(format!("{prefix}/u"), init_uniform(1, attn, -range, range, rng)?)?;
        store.insert(format!("{prefix}/w_x"), init_uniform(attn, input, -range, range, rng)?)?;
        store.insert(format!("{prefix}/w_h"), init_uniform(attn, hidden, -range, range, rng)?)?;
        store.insert(format!("{prefix}/w_m"), init_uniform(attn, hidden, -range, range, rng)?)?;
        Ok(())
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            u: tape.param(store, &format!("{prefix}/u"))?,
            w_x: tape.param(store, &format!("{prefix}/w_x"))?,
            w_h: tape.param(store, &format!("{prefix}/w_h"))?,
            w_m: tape.param(store, &format!("{prefix}/w_m"))?,
        })
    }

    /// The reader-dependent half of the score, `w_x x_t + w_h h_{t-1}`.
    pub fn query(&self, tape: &mut Tape, x: Var, h_prev: Var) -> Result<Var> {
        let a = tape.matmul(self.w_x, x)?;
        let b = tape.matmul(self.w_h, h_prev)?;
        tape.add(a, b)
    }

    /// The candidate-dependent half, `w_m M` for candidate columns `M` (h×n).
    pub fn keys(&self, tape: &mut Tape, candidates: Var) -> Result<Var> {
        tape.matmul(self.w_m, candidates)
    }

    /// Scores `(1, n)` from a query and precomputed keys (a×n).
    pub fn scores_from_keys(&self, tape: &mut Tape, query: Var, keys: Var) -> Result<Var> {
        let pre = tape.add(keys, query)?;
        let act = tape.tanh(pre)?;
        tape.matmul(self.u, act)
    }

    /// Scores `(1, n)` for the `n` candidate columns of `candidates` (h×n).
    pub fn scores(&self, tape: &mut Tape, query: Var, candidates: Var) -> Result<Var> {
        let keys = self.keys(tape, candidates)?;
        self.scores_from_keys(tape, query, keys)
    }
}

/// Single-candidate score `u · tanh(W [x; h_prev; m])`.
pub fn attention_score(
    tape: &mut Tape,
    attn: &AttentionParams,
    x: Var,
    h_prev: Var,
    candidate: Var,
) -> Result<Var> {
    let q = attn.query(tape, x, h_prev)?;
    attn.scores(tape, q, candidate)
}

/// Aggregated message and its attention weights.
#[derive(Clone, Copy, Debug)]
pub struct Aggregate {
    pub message: Var,
    /// `(1, n)` row of normalized weights.
    pub weights: Var,
}

/// Softmax over candidate scores, then the weighted sum of candidate columns.
pub fn attend(
    tape: &mut Tape,
    attn: &AttentionParams,
    query: Var,
    candidates: Var,
) -> Result<Aggregate> {
    let keys = attn.keys(tape, candidates)?;
    attend_with_keys(tape, attn, query, candidates, keys)
}

/// [`attend`] with the candidate keys already projected.
pub fn attend_with_keys(
    tape: &mut Tape,
    attn: &AttentionParams,
    query: Var,
    candidates: Var,
    keys: Var,
) -> Result<Aggregate> {
    let s = attn.scores_from_keys(tape, query, keys)?;
    let weights = tape.softmax(s)?;
    let col = tape.transpose(weights)?;
    let message = tape.matmul(candidates, col)?;
    Ok(Aggregate { message, weights })
}

/// Complete-graph aggregation for `target` at one step. `sources` must hold
/// exactly the states of every task other than `target`; weights come out
/// in source-id order.
pub fn cg_aggregate(
    tape: &mut Tape,
    target: usize,
    num_tasks: usize,
    sources: &BTreeMap<usize, Var>,
    attn: &AttentionParams,
    x: Var,
    h_prev: Var,
) -> Result<Aggregate> {
    if num_tasks < 2 {
        return Err(Error::contract("complete-graph aggregation needs K >= 2"));
    }
    for i in (0..num_tasks).filter(|&i| i != target) {
        if !sources.contains_key(&i) {
            return Err(Error::contract(format!("missing source task {i} for target {target}")));
        }
    }
    if sources.contains_key(&target) || sources.len() != num_tasks - 1 {
        return Err(Error::contract(format!(
            "sources for target {target} must be exactly the other {} tasks",
            num_tasks - 1
        )));
    }
    let cols: Vec<Var> = sources.values().copied().collect();
    let candidates = tape.concat_cols(&cols)?;
    let q = attn.query(tape, x, h_prev)?;
    attend(tape, attn, q, candidates)
}

/// The virtual node's write pass: a vanilla unroll of the shared encoder.
pub fn sg_shared_pass(tape: &mut Tape, shared: &LstmParams, xs: &[Var]) -> Result<Vec<LstmState>> {
    if xs.is_empty() {
        return Err(Error::contract("shared pass over an empty sentence"));
    }
    run_sequence(tape, Cell::Vanilla(shared), xs, None)
}

/// Star-graph retrieval over every shared position (or, when the caller
/// passes a prefix, over the positions it was given).
pub fn sg_aggregate(
    tape: &mut Tape,
    shared_states: &[Var],
    attn: &AttentionParams,
    x: Var,
    h_prev: Var,
) -> Result<Aggregate> {
    if shared_states.is_empty() {
        return Err(Error::contract("star-graph aggregation over no shared states"));
    }
    let candidates = tape.concat_cols(shared_states)?;
    let q = attn.query(tape, x, h_prev)?;
    attend(tape, attn, q, candidates)
}

/// Attention weights recorded while encoding one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageTrace {
    pub task: usize,
    pub mode: CommMode,
    /// Source task ids labelling each weight column (complete graph only).
    pub sources: Vec<usize>,
    /// One row per target timestep: `α_t` over sources, or `β_t` over the
    /// `T` shared positions (zero-padded beyond `t` under causal attention).
    pub rows: Vec<Vec<f64>>,
    pub tokens: Vec<String>,
}

impl MessageTrace {
    /// Largest deviation of any row sum from 1, and whether all entries are ≥ 0.
    pub fn stochasticity(&self) -> (f64, bool) {
        let mut dev: f64 = 0.0;
        let mut nonneg = true;
        for row in &self.rows {
            dev = dev.max((row.iter().sum::<f64>() - 1.0).abs());
            nonneg &= row.iter().all(|&w| w >= 0.0);
        }
        (dev, nonneg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn attn_store(u: Vec<f64>, d: usize, h: usize) -> ParamStore {
        let a = u.len();
        let mut s = ParamStore::new();
        s.insert("a/u", Tensor::new(1, a, u).unwrap()).unwrap();
        s.insert("a/w_x", Tensor::filled(a, d, 0.3)).unwrap();
        s.insert("a/w_h", Tensor::filled(a, h, -0.2)).unwrap();
        s.insert("a/w_m", Tensor::filled(a, h, 0.1)).unwrap();
        s
    }

    #[test]
    fn cg_needs_two_tasks() {
        assert!(TaskGraph::new(CommMode::Cg, 1).is_err());
        assert!(TaskGraph::new(CommMode::Sg, 1).is_ok());
        let g = TaskGraph::new(CommMode::Cg, 3).unwrap();
        assert_eq!(g.sources(1), vec![0, 2]);
        assert_eq!(g.edges().len(), 6);
        assert!(!g.has_virtual_node());
        assert!(TaskGraph::new(CommMode::Sg, 3).unwrap().has_virtual_node());
    }

    #[test]
    fn zero_u_scores_zero() {
        let store = attn_store(vec![0.0, 0.0], 2, 2);
        let mut tape = Tape::new();
        let attn = AttentionParams::bind(&mut tape, &store, "a").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let h = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let m = tape.constant(Tensor::vector(vec![3.0, 1.0]));
        let s = attention_score(&mut tape, &attn, x, h, m).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn k2_puts_all_weight_on_the_other_task() {
        let store = attn_store(vec![0.4, -0.9], 2, 2);
        let mut tape = Tape::new();
        let attn = AttentionParams::bind(&mut tape, &store, "a").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let h = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let src = tape.constant(Tensor::vector(vec![0.25, -0.75]));
        let sources = BTreeMap::from([(1usize, src)]);
        let agg = cg_aggregate(&mut tape, 0, 2, &sources, &attn, x, h).unwrap();
        assert_eq!(tape.value(agg.weights).data(), &[1.0]);
        assert_eq!(tape.value(agg.message).data(), &[0.25, -0.75]);
    }

    #[test]
    fn missing_or_extra_source_rejected() {
        let store = attn_store(vec![0.4, -0.9], 2, 2);
        let mut tape = Tape::new();
        let attn = AttentionParams::bind(&mut tape, &store, "a").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let h = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let src = tape.constant(Tensor::vector(vec![0.25, -0.75]));
        let only_one = BTreeMap::from([(1usize, src)]);
        assert!(cg_aggregate(&mut tape, 0, 3, &only_one, &attn, x, h).is_err());
        let with_self = BTreeMap::from([(0usize, src), (1, src)]);
        assert!(cg_aggregate(&mut tape, 0, 2, &with_self, &attn, x, h).is_err());
    }

    #[test]
    fn sg_single_position() {
        let store = attn_store(vec![0.4, -0.9], 2, 2);
        let mut tape = Tape::new();
        let attn = AttentionParams::bind(&mut tape, &store, "a").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let h = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let s1 = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let agg = sg_aggregate(&mut tape, &[s1], &attn, x, h).unwrap();
        assert_eq!(tape.value(agg.weights).data(), &[1.0]);
        assert_eq!(tape.value(agg.message).data(), &[0.1, 0.2]);
        assert!(sg_aggregate(&mut tape, &[], &attn, x, h).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("cg".parse::<CommMode>().unwrap(), CommMode::Cg);
        assert!("mesh".parse::<CommMode>().is_err());
    }
}
