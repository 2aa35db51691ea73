//! The multi-task network: shared embeddings, per-task encoders with message
//! passing, and per-task output heads.
//!
//! Parameter layout:
//!
//! ```text
//! shared/embedding          |V| × d
//! shared/lstm/*             star graph only (the virtual node)
//! shared/attn/*             only with shared attention
//! task/<k>/lstm/*           every mode
//! task/<k>/fusion/*         cg and sg
//! task/<k>/attn/*           cg and sg, unless attention is shared
//! task/<k>/head/{w,b}       classification tasks
//! task/<k>/crf/{w_e,b_e,trans}   tagging tasks
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{lstm_fused_step, lstm_step, run_sequence, Cell, FusionParams, LstmParams, LstmState};
use crate::data::{Label, LabelAlphabet, TaskKind, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::{ClassifierParams, CrfParams};
use crate::message::{
    attend_with_keys, cg_aggregate, sg_aggregate, sg_shared_pass, AttentionParams, CommMode,
    MessageTrace, TaskGraph,
};
use crate::params::{init_uniform, ParamStore, SHARED_PREFIX};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "shared/embedding";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: CommMode,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Attention score dimension; 0 means "same as hidden".
    pub attn_dim: usize,
    pub init_range: f64,
    pub forget_bias: f64,
    pub shared_attention: bool,
    pub causal_attention: bool,
    /// Complete graph only: source encodings feed messages forward but
    /// receive no gradient through them.
    pub stop_grad_messages: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: CommMode::Sg,
            hidden: 200,
            embed_dim: 200,
            attn_dim: 0,
            init_range: 0.1,
            forget_bias: 1.0,
            shared_attention: false,
            causal_attention: false,
            stop_grad_messages: false,
        }
    }
}

impl ModelConfig {
    pub fn attn_size(&self) -> usize {
        if self.attn_dim == 0 {
            self.hidden
        } else {
            self.attn_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub name: String,
    pub kind: TaskKind,
    pub labels: LabelAlphabet,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeOptions {
    /// Replace every aggregated message with zeros (attention is still computed).
    pub force_zero_messages: bool,
}

/// Output of [`Model::encode`].
#[derive(Clone, Debug)]
pub struct Encoding {
    pub states: Vec<Var>,
    pub trace: Option<MessageTrace>,
    /// Auxiliary encoder unrolls run for this sentence: `K−1` source passes
    /// in complete-graph mode, one shared pass in star-graph mode.
    pub source_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    Tags(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: TaskGraph,
    pub tasks: Vec<TaskInfo>,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

fn task_prefix(k: usize) -> String {
    format!("task/{k}")
}

impl Model {
    /// Fresh model; every parameter is drawn from one RNG seeded with `seed`,
    /// in the registration order documented at module level.
    pub fn new(config: ModelConfig, vocab: Vocabulary, tasks: Vec<TaskInfo>, seed: u64) -> Result<Self> {
        let graph = TaskGraph::new(config.mode, tasks.len())?;
        if config.hidden == 0 || config.embed_dim == 0 {
            return Err(Error::Config("hidden and embedding sizes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = config.init_range;
        let (d, h, a) = (config.embed_dim, config.hidden, config.attn_size());
        let mut params = ParamStore::new();
        params.insert(EMBEDDING, init_uniform(vocab.len(), d, -range, range, &mut rng)?)?;
        let communicates = config.mode != CommMode::Single;
        if config.mode == CommMode::Sg {
            LstmParams::register(&mut params, "shared/lstm", d, h, range, config.forget_bias, &mut rng)?;
        }
        if communicates && config.shared_attention {
            AttentionParams::register(&mut params, "shared/attn", d, h, a, range, &mut rng)?;
        }
        for (k, task) in tasks.iter().enumerate() {
            let pre = task_prefix(k);
            LstmParams::register(&mut params, &format!("{pre}/lstm"), d, h, range, config.forget_bias, &mut rng)?;
            if communicates {
                FusionParams::register(&mut params, &format!("{pre}/fusion"), h, range, &mut rng)?;
                if !config.shared_attention {
                    AttentionParams::register(&mut params, &format!("{pre}/attn"), d, h, a, range, &mut rng)?;
                }
            }
            match task.kind {
                TaskKind::Classification => ClassifierParams::register(
                    &mut params,
                    &format!("{pre}/head"),
                    task.labels.len(),
                    h,
                    range,
                    &mut rng,
                )?,
                TaskKind::Tagging => CrfParams::register(
                    &mut params,
                    &format!("{pre}/crf"),
                    task.labels.len(),
                    h,
                    range,
                    &mut rng,
                )?,
            }
        }
        Ok(Model {
            config,
            graph,
            tasks,
            vocab,
            params,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn mode(&self) -> CommMode {
        self.config.mode
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.tasks.len() {
            return Err(Error::contract(format!(
                "task {task} is not registered ({} tasks)",
                self.tasks.len()
            )));
        }
        Ok(())
    }

    fn attn_prefix(&self, task: usize) -> String {
        if self.config.shared_attention {
            "shared/attn".into()
        } else {
            format!("{}/attn", task_prefix(task))
        }
    }

    /// Embedding rows for `tokens` as input columns.
    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Vec<Var>> {
        let emb = tape.param(&self.params, EMBEDDING)?;
        tokens.iter().map(|&t| tape.row(emb, t)).collect()
    }

    /// Encodes a sentence for `task`: message passing, then the task's LSTM†
    /// (or plain LSTM in single mode).
    pub fn encode(&self, tape: &mut Tape, task: usize, tokens: &[usize], opts: EncodeOptions) -> Result<Encoding> {
        self.check_task(task)?;
        if tokens.is_empty() {
            return Err(Error::contract("cannot encode an empty sentence"));
        }
        let xs = self.embed(tape, tokens)?;
        let pre = task_prefix(task);
        let lstm = LstmParams::bind(tape, &self.params, &format!("{pre}/lstm"))?;
        let words = tokens.iter().map(|&t| self.vocab.token(t).to_owned()).collect();

        if self.config.mode == CommMode::Single {
            let states = run_sequence(tape, Cell::Vanilla(&lstm), &xs, None)?;
            return Ok(Encoding {
                states: states.iter().map(|s| s.h).collect(),
                trace: None,
                source_passes: 0,
            });
        }

        let fusion = FusionParams::bind(tape, &self.params, &format!("{pre}/fusion"))?;
        let attn = AttentionParams::bind(tape, &self.params, &self.attn_prefix(task))?;
        let hidden = self.config.hidden;
        let steps = xs.len();
        let mut state = LstmState::zeros(tape, hidden);
        let mut states = Vec::with_capacity(steps);
        let mut rows = Vec::with_capacity(steps);
        let zero = opts
            .force_zero_messages
            .then(|| tape.constant(Tensor::zeros(hidden, 1)));

        let (sources, source_passes) = match self.config.mode {
            CommMode::Cg => {
                let sources = self.graph.sources(task);
                let mut per_source: Vec<Vec<Var>> = Vec::with_capacity(sources.len());
                for &i in &sources {
                    let p = LstmParams::bind(tape, &self.params, &format!("{}/lstm", task_prefix(i)))?;
                    let run = run_sequence(tape, Cell::Vanilla(&p), &xs, None)?;
                    let hs = run
                        .iter()
                        .map(|s| {
                            if self.config.stop_grad_messages {
                                tape.detach(s.h)
                            } else {
                                Ok(s.h)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    per_source.push(hs);
                }
                for t in 0..steps {
                    let at_t: BTreeMap<usize, Var> =
                        sources.iter().zip(&per_source).map(|(&i, hs)| (i, hs[t])).collect();
                    let agg = cg_aggregate(tape, task, self.num_tasks(), &at_t, &attn, xs[t], state.h)?;
                    rows.push(tape.value(agg.weights).data().to_vec());
                    let r = zero.unwrap_or(agg.message);
                    state = lstm_fused_step(tape, &lstm, &fusion, xs[t], &state, r)?;
                    states.push(state.h);
                }
                let n = sources.len();
                (sources, n)
            }
            CommMode::Sg => {
                let shared = LstmParams::bind(tape, &self.params, "shared/lstm")?;
                let hs: Vec<Var> = sg_shared_pass(tape, &shared, &xs)?.iter().map(|s| s.h).collect();
                let all = if self.config.causal_attention {
                    None
                } else {
                    let m = tape.concat_cols(&hs)?;
                    let keys = attn.keys(tape, m)?;
                    Some((m, keys))
                };
                for t in 0..steps {
                    let (agg, mut row) = match all {
                        Some((m, keys)) => {
                            let q = attn.query(tape, xs[t], state.h)?;
                            let agg = attend_with_keys(tape, &attn, q, m, keys)?;
                            (agg, tape.value(agg.weights).data().to_vec())
                        }
                        None => {
                            let agg = sg_aggregate(tape, &hs[..=t], &attn, xs[t], state.h)?;
                            (agg, tape.value(agg.weights).data().to_vec())
                        }
                    };
                    row.resize(steps, 0.0);
                    rows.push(row);
                    let r = zero.unwrap_or(agg.message);
                    state = lstm_fused_step(tape, &lstm, &fusion, xs[t], &state, r)?;
                    states.push(state.h);
                }
                (Vec::new(), 1)
            }
            CommMode::Single => unreachable!("handled above"),
        };

        Ok(Encoding {
            states,
            trace: Some(MessageTrace {
                task,
                mode: self.config.mode,
                sources,
                rows,
                tokens: words,
            }),
            source_passes,
        })
    }

    /// Single-task reference encoding with the task's own LSTM and no messages.
    pub fn encode_vanilla(&self, tape: &mut Tape, task: usize, tokens: &[usize]) -> Result<Vec<Var>> {
        self.check_task(task)?;
        let xs = self.embed(tape, tokens)?;
        let lstm = LstmParams::bind(tape, &self.params, &format!("{}/lstm", task_prefix(task)))?;
        let mut state = LstmState::zeros(tape, lstm.hidden);
        let mut out = Vec::with_capacity(xs.len());
        for &x in &xs {
            state = lstm_step(tape, &lstm, x, &state)?;
            out.push(state.h);
        }
        Ok(out)
    }

    /// Negative log-likelihood of `label` for one sentence.
    pub fn loss(&self, tape: &mut Tape, task: usize, tokens: &[usize], label: &Label) -> Result<(Var, Encoding)> {
        let enc = self.encode(tape, task, tokens, EncodeOptions::default())?;
        let pre = task_prefix(task);
        let loss = match (self.tasks[task].kind, label) {
            (TaskKind::Classification, Label::Class(gold)) => {
                let head = ClassifierParams::bind(tape, &self.params, &format!("{pre}/head"))?;
                head.nll(tape, *enc.states.last().expect("non-empty"), *gold)?
            }
            (TaskKind::Tagging, Label::Tags(gold)) => {
                let head = CrfParams::bind(tape, &self.params, &format!("{pre}/crf"))?;
                head.nll(tape, &enc.states, gold)?
            }
            _ => return Err(Error::contract(format!("label kind does not match task {task}"))),
        };
        Ok((loss, enc))
    }

    pub fn predict(&self, task: usize, tokens: &[usize]) -> Result<(Prediction, Option<MessageTrace>)> {
        let mut tape = Tape::inference();
        let enc = self.encode(&mut tape, task, tokens, EncodeOptions::default())?;
        let pre = task_prefix(task);
        let pred = match self.tasks[task].kind {
            TaskKind::Classification => {
                let head = ClassifierParams::bind(&mut tape, &self.params, &format!("{pre}/head"))?;
                let logits = head.logits(&mut tape, *enc.states.last().expect("non-empty"))?;
                let z = tape.value(logits).data();
                // First maximum wins.
                let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
                Prediction::Class(best)
            }
            TaskKind::Tagging => {
                let head = CrfParams::bind(&mut tape, &self.params, &format!("{pre}/crf"))?;
                Prediction::Tags(head.decode(&mut tape, &enc.states)?)
            }
        };
        Ok((pred, enc.trace))
    }

    /// Names of parameters in the shared namespace.
    pub fn shared_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with(SHARED_PREFIX))
            .map(String::from)
            .collect()
    }

    /// SHA-256 over all shared parameters.
    pub fn shared_digest(&self) -> String {
        self.params.digest(|n| n.starts_with(SHARED_PREFIX))
    }
}
