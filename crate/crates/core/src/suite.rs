//! Finite-difference verification of every differentiable component.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::{run_sequence, Cell, FusionParams, LstmParams};
use crate::data::{Label, LabelAlphabet, TaskKind, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_gradient, max_relative_error};
use crate::heads::{ClassifierParams, CrfParams};
use crate::message::CommMode;
use crate::model::{Model, ModelConfig, TaskInfo};
use crate::params::{init_uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Lstm,
    Fused,
    Cg,
    Sg,
    Softmax,
    Crf,
}

impl Scope {
    pub const ALL: [Scope; 6] = [Scope::Lstm, Scope::Fused, Scope::Cg, Scope::Sg, Scope::Softmax, Scope::Crf];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Lstm => "lstm",
            Scope::Fused => "fused",
            Scope::Cg => "cg",
            Scope::Sg => "sg",
            Scope::Softmax => "softmax",
            Scope::Crf => "crf",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown grad-check scope {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub scope: Scope,
    pub max_rel_error: f64,
    pub scalars: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Compares tape gradients of `f` with central differences over every
/// scalar of `store`. With `corrupt`, the analytic gradient is perturbed
/// first so the comparison must fail.
fn compare<F>(scope: Scope, store: &mut ParamStore, corrupt: bool, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let mut analytic = tape.backward(loss)?;
    if corrupt {
        let ids: Vec<_> = analytic.iter().map(|(id, _)| id).collect();
        let id = *ids.first().ok_or_else(|| Error::contract("loss touches no parameter"))?;
        let mut g = analytic.get(id).expect("present").clone();
        g.data_mut()[0] = g.data()[0] * 1.5 + 0.01;
        analytic.insert(id, g);
    }
    let numeric = finite_diff_gradient(
        |s| {
            let mut t = Tape::inference();
            let l = f(&mut t, s)?;
            Ok(t.value(l).item())
        },
        store,
        STEP,
    )?;
    Ok(CheckResult {
        scope,
        max_rel_error: max_relative_error(&analytic, &numeric),
        scalars: store.total_scalars(),
    })
}

fn random_columns(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::vector((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

/// `Σ_t w_t · h_t` with fixed random weights, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, hs: &[Var], weights: &[Tensor]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&h, w) in hs.iter().zip(weights) {
        let w = tape.constant(w.clone());
        let p = tape.hadamard(h, w)?;
        let s = tape.sum(p)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    total.ok_or_else(|| Error::contract("empty sequence"))
}

const D: usize = 3;
const H: usize = 4;
const T: usize = 4;
const RANGE: f64 = 0.5;

fn check_cells(scope: Scope, seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    LstmParams::register(&mut store, "lstm", D, H, RANGE, 1.0, &mut rng)?;
    FusionParams::register(&mut store, "fusion", H, RANGE, &mut rng)?;
    let xs = random_columns(&mut rng, T, D);
    let rs = random_columns(&mut rng, T, H);
    let ws = random_columns(&mut rng, T, H);
    if scope == Scope::Lstm {
        // Drop the unused fusion matrices so every checked scalar matters.
        let mut only = ParamStore::new();
        for (_, p) in store.iter().filter(|(_, p)| p.name.starts_with("lstm/")) {
            only.insert(p.name.clone(), p.value.clone())?;
        }
        store = only;
    }
    compare(scope, &mut store, corrupt, |tape, s| {
        let p = LstmParams::bind(tape, s, "lstm")?;
        let xs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let states = if scope == Scope::Lstm {
            run_sequence(tape, Cell::Vanilla(&p), &xs, None)?
        } else {
            let fusion = FusionParams::bind(tape, s, "fusion")?;
            let rs: Vec<Var> = rs.iter().map(|r| tape.constant(r.clone())).collect();
            run_sequence(tape, Cell::Fused(&p, &fusion), &xs, Some(&rs))?
        };
        let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
        weighted_sum(tape, &hs, &ws)
    })
}

fn tiny_model(mode: CommMode, causal: bool, seed: u64) -> Result<Model> {
    let mut vocab = Vocabulary::new();
    for w in ["a", "b", "c", "d"] {
        vocab.add(w);
    }
    vocab.freeze();
    let tasks = (0..3)
        .map(|k| TaskInfo {
            name: format!("t{k}"),
            kind: TaskKind::Classification,
            labels: LabelAlphabet::new(vec!["0".into(), "1".into(), "2".into()]),
        })
        .collect();
    let cfg = ModelConfig {
        mode,
        hidden: H,
        embed_dim: D,
        attn_dim: 3,
        init_range: RANGE,
        causal_attention: causal,
        ..ModelConfig::default()
    };
    Model::new(cfg, vocab, tasks, seed)
}

fn check_message(scope: Scope, seed: u64, corrupt: bool) -> Result<CheckResult> {
    let (mode, variants) = match scope {
        Scope::Cg => (CommMode::Cg, vec![false]),
        _ => (CommMode::Sg, vec![false, true]),
    };
    let tokens = [2, 3, 4, 2, 5];
    let mut worst: Option<CheckResult> = None;
    for causal in variants {
        let template = tiny_model(mode, causal, seed)?;
        let mut store = template.params.clone();
        let r = compare(scope, &mut store, corrupt, |tape, s| {
            let mut m = template.clone();
            m.params = s.clone();
            Ok(m.loss(tape, 1, &tokens, &Label::Class(2))?.0)
        })?;
        if worst.as_ref().map_or(true, |w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    Ok(worst.expect("at least one variant"))
}

fn check_softmax(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    ClassifierParams::register(&mut store, "head", 4, H, RANGE, &mut rng)?;
    store.insert("h", init_uniform(H, 1, -1.0, 1.0, &mut rng)?)?;
    compare(Scope::Softmax, &mut store, corrupt, |tape, s| {
        let head = ClassifierParams::bind(tape, s, "head")?;
        let h = tape.param(s, "h")?;
        head.nll(tape, h, 1)
    })
}

fn check_crf(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    CrfParams::register(&mut store, "crf", 3, H, RANGE, &mut rng)?;
    let states = random_columns(&mut rng, T, H);
    let gold: Vec<usize> = (0..T).map(|_| rng.gen_range(0..3)).collect();
    compare(Scope::Crf, &mut store, corrupt, |tape, s| {
        let head = CrfParams::bind(tape, s, "crf")?;
        let hs: Vec<Var> = states.iter().map(|h| tape.constant(h.clone())).collect();
        head.nll(tape, &hs, &gold)
    })
}

pub fn run_check(scope: Scope, seed: u64, corrupt: bool) -> Result<CheckResult> {
    match scope {
        Scope::Lstm | Scope::Fused => check_cells(scope, seed, corrupt),
        Scope::Cg | Scope::Sg => check_message(scope, seed, corrupt),
        Scope::Softmax => check_softmax(seed, corrupt),
        Scope::Crf => check_crf(seed, corrupt),
    }
}

/// Runs `scopes` in order; `corrupt` names a scope whose analytic gradient
/// is deliberately perturbed.
pub fn run_suite(scopes: &[Scope], seed: u64, corrupt: Option<Scope>) -> Result<Vec<CheckResult>> {
    scopes
        .iter()
        .map(|&s| run_check(s, seed, corrupt == Some(s)))
        .collect()
}
