//! Multi-task training, evaluation and leave-one-task-out transfer.

mod adadelta;
mod config;
mod log;
pub mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adadelta::{adadelta_update, AdaDeltaState};
pub use config::TrainConfig;
pub use log::{LogRecord, TrainLog};

use crate::data::{Label, Sample, TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::message::CommMode;
use crate::model::{Model, Prediction, TaskInfo};
use crate::params::{Gradients, SHARED_PREFIX};
use crate::tape::Tape;

/// Runs per-sample work either inline or on a fixed-size thread pool.
/// Results always come back in input order.
pub struct Exec {
    pool: Option<rayon::ThreadPool>,
}

impl Exec {
    pub fn new(jobs: usize) -> Result<Self> {
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Exec { pool })
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| (0..n).into_par_iter().map(&f).collect())
            }
        }
    }
}

/// Mean NLL of the batch and the gradient of `lambda/|B| · Σ nll`.
/// Per-sample gradients are summed in batch order whatever the thread count.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Sample],
    task: usize,
    lambda: f64,
    exec: &Exec,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let per_sample = exec.map(batch.len(), |i| {
        let mut tape = Tape::new();
        let (loss, _) = model.loss(&mut tape, task, &batch[i].tokens, &batch[i].label)?;
        Ok((tape.value(loss).item(), tape.backward(loss)?))
    })?;
    let mut total = Gradients::new();
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.merge(g);
    }
    let n = batch.len() as f64;
    total.scale(lambda / n);
    Ok((loss / n, total))
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdaDeltaState,
    exec: Exec,
}

impl Trainer {
    /// Applies the config's freeze set to the model.
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.params.freeze_prefixes(&config.freeze_set());
        let optimizer = AdaDeltaState::new(&model.params);
        let exec = Exec::new(config.jobs)?;
        Ok(Trainer {
            model,
            config,
            optimizer,
            exec,
        })
    }

    pub fn exec(&self) -> &Exec {
        &self.exec
    }

    /// One optimizer update from a batch of task `task`. Only that task's
    /// loss contributes. Returns the batch mean NLL.
    pub fn train_step(&mut self, batch: &[&Sample], task: usize) -> Result<f64> {
        let lambda = self.config.lambda(task)?;
        let (loss, mut grads) = batch_gradients(&self.model, batch, task, lambda, &self.exec)?;
        if self.config.clip_norm > 0.0 {
            grads.clip_global_norm(self.config.clip_norm);
        }
        adadelta_update(
            &mut self.optimizer,
            &mut self.model.params,
            &grads,
            self.config.rho,
            self.config.eps,
            self.config.l2,
        )?;
        Ok(loss)
    }
}

/// A task's headline metric. `error` is lower-better; `f1` and `accuracy`
/// are higher-better.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub name: &'static str,
    pub value: f64,
}

impl Metric {
    /// Higher is better.
    pub fn score(&self) -> f64 {
        if self.name == "error" {
            -self.value
        } else {
            self.value
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub primary: Metric,
    pub metrics: Vec<Metric>,
    pub predictions: Vec<Prediction>,
}

/// Scores `samples` of task `task`: error rate (%) for classification; span
/// F1 plus token accuracy for B-/I- tag sets; token accuracy otherwise.
pub fn evaluate(model: &Model, task: usize, samples: &[Sample], exec: &Exec) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let info = model
        .tasks
        .get(task)
        .ok_or_else(|| Error::contract(format!("task {task} is not registered")))?;
    let predictions = exec.map(samples.len(), |i| Ok(model.predict(task, &samples[i].tokens)?.0))?;
    let metrics = match info.kind {
        TaskKind::Classification => {
            let mut pred = Vec::with_capacity(samples.len());
            let mut gold = Vec::with_capacity(samples.len());
            for (p, s) in predictions.iter().zip(samples) {
                match (p, &s.label) {
                    (Prediction::Class(p), Label::Class(g)) => {
                        pred.push(*p);
                        gold.push(*g);
                    }
                    _ => return Err(Error::contract("label kind does not match task")),
                }
            }
            vec![Metric {
                name: "error",
                value: metrics::error_rate(&pred, &gold),
            }]
        }
        TaskKind::Tagging => {
            let mut pred = Vec::with_capacity(samples.len());
            let mut gold = Vec::with_capacity(samples.len());
            for (p, s) in predictions.iter().zip(samples) {
                match (p, &s.label) {
                    (Prediction::Tags(p), Label::Tags(g)) => {
                        pred.push(p.clone());
                        gold.push(g.clone());
                    }
                    _ => return Err(Error::contract("label kind does not match task")),
                }
            }
            let accuracy = Metric {
                name: "accuracy",
                value: metrics::token_accuracy(&pred, &gold),
            };
            if metrics::is_chunk_scheme(info.labels.labels()) {
                let names = |seqs: &[Vec<usize>]| -> Vec<Vec<&str>> {
                    seqs.iter()
                        .map(|s| s.iter().map(|&t| info.labels.name(t)).collect())
                        .collect()
                };
                let prf = metrics::corpus_span_prf(&names(&gold), &names(&pred));
                vec![
                    Metric {
                        name: "f1",
                        value: prf.f1,
                    },
                    accuracy,
                ]
            } else {
                vec![accuracy]
            }
        }
    };
    Ok(Evaluation {
        primary: metrics[0],
        metrics,
        predictions,
    })
}

/// Best development result of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBest {
    pub task: String,
    pub metric: &'static str,
    /// 0 when no epoch ran.
    pub epoch: usize,
    pub dev: Option<f64>,
    /// Test metric of the parameters at the best dev epoch.
    pub test: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best mean dev score.
    pub model: Model,
    pub log: TrainLog,
    pub best: Vec<TaskBest>,
}

fn check_datasets(model: &Model, tasks: &[TaskDataset]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Data("no tasks to train".into()));
    }
    if tasks.len() != model.num_tasks() {
        return Err(Error::contract(format!(
            "{} datasets for a model with {} tasks",
            tasks.len(),
            model.num_tasks()
        )));
    }
    for (t, info) in tasks.iter().zip(&model.tasks) {
        if t.kind != info.kind || t.labels != info.labels {
            return Err(Error::Data(format!("dataset {} does not match the model's task", t.name)));
        }
    }
    Ok(())
}

/// Batches for one epoch as `(task, sample indices)`: each task's training
/// set shuffled and chunked, then interleaved round-robin (or, with
/// `proportional`, in one joint random order).
fn epoch_schedule(tasks: &[TaskDataset], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    let per_task: Vec<Vec<Vec<usize>>> = tasks
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..t.train.len()).collect();
            idx.shuffle(rng);
            idx.chunks(config.batch_size).map(|c| c.to_vec()).collect()
        })
        .collect();
    let mut out = Vec::new();
    let rounds = per_task.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..rounds {
        for (k, batches) in per_task.iter().enumerate() {
            if let Some(b) = batches.get(r) {
                out.push((k, b.clone()));
            }
        }
    }
    if config.proportional {
        out.shuffle(rng);
    }
    out
}

/// Trains all tasks jointly with early stopping on the dev metric.
pub fn train_loop(model: Model, tasks: &[TaskDataset], config: &TrainConfig) -> Result<TrainOutcome> {
    check_datasets(&model, tasks)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut log = TrainLog::default();
    let mut best: Vec<TaskBest> = tasks
        .iter()
        .zip(&trainer.model.tasks)
        .map(|(t, info)| TaskBest {
            task: t.name.clone(),
            metric: match info.kind {
                TaskKind::Classification => "error",
                TaskKind::Tagging if metrics::is_chunk_scheme(info.labels.labels()) => "f1",
                TaskKind::Tagging => "accuracy",
            },
            epoch: 0,
            dev: None,
            test: None,
        })
        .collect();
    let mut best_params = trainer.model.params.clone();
    let mut best_mean = f64::NEG_INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        let mut loss_sum = vec![0.0; tasks.len()];
        let mut batches = vec![0usize; tasks.len()];
        for (k, idx) in epoch_schedule(tasks, config, &mut rng) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &tasks[k].train[i]).collect();
            loss_sum[k] += trainer.train_step(&batch, k)?;
            batches[k] += 1;
        }
        let mut improved = false;
        let mut mean = 0.0;
        for (k, task) in tasks.iter().enumerate() {
            log.push(epoch, &task.name, "train", "loss", loss_sum[k] / batches[k].max(1) as f64);
            let (score, better) = if task.dev.is_empty() {
                // Without a dev split the latest epoch is always preferred.
                (0.0, true)
            } else {
                let dev = evaluate(&trainer.model, k, &task.dev, trainer.exec())?.primary;
                log.push(epoch, &task.name, "dev", dev.name, dev.value);
                let prev = best[k].dev.map(|v| Metric { name: dev.name, value: v }.score());
                let better = prev.map_or(true, |p| dev.score() > p);
                if better {
                    best[k].dev = Some(dev.value);
                }
                (dev.score(), better)
            };
            mean += score / tasks.len() as f64;
            if better {
                improved = true;
                best[k].epoch = epoch;
                if !task.test.is_empty() {
                    let test = evaluate(&trainer.model, k, &task.test, trainer.exec())?.primary;
                    log.push(epoch, &task.name, "test", test.name, test.value);
                    best[k].test = Some(test.value);
                }
            }
        }
        if mean >= best_mean {
            best_mean = mean;
            best_params = trainer.model.params.clone();
        }
        stale = if improved { 0 } else { stale + 1 };
        if stale >= config.patience.max(1) {
            break;
        }
    }
    let mut model = trainer.model;
    if config.epochs > 0 {
        model.params = best_params;
    }
    Ok(TrainOutcome { model, log, best })
}

/// Result of [`transfer_train`] with digests of the transferred parameters.
#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub outcome: TrainOutcome,
    pub shared_before: String,
    pub shared_after: String,
}

/// A fresh single-task star-graph model whose `shared/*` parameters are
/// copied from `pretrained` and frozen. `target` must be indexed with the
/// pretrained vocabulary.
pub fn transfer_model(pretrained: &Model, target: &TaskDataset, seed: u64) -> Result<Model> {
    if pretrained.mode() != CommMode::Sg || !crate::checkpoint::has_shared_encoder(pretrained) {
        return Err(Error::Data(format!(
            "pretrained model has no shared encoder (mode {}); transfer needs a star-graph model",
            pretrained.mode()
        )));
    }
    let info = TaskInfo {
        name: target.name.clone(),
        kind: target.kind,
        labels: target.labels.clone(),
    };
    let mut model = Model::new(pretrained.config.clone(), pretrained.vocab.clone(), vec![info], seed)?;
    for (_, p) in pretrained.params.iter() {
        if p.name.starts_with(SHARED_PREFIX) {
            model.params.set_value(&p.name, p.value.clone())?;
        }
    }
    model.params.freeze_prefixes(&[SHARED_PREFIX]);
    Ok(model)
}

/// Leave-one-task-out transfer: trains fresh task parameters on `target`
/// over the frozen shared layer of `pretrained`.
pub fn transfer_train(pretrained: &Model, target: &TaskDataset, config: &TrainConfig) -> Result<TransferOutcome> {
    let model = transfer_model(pretrained, target, config.seed)?;
    let shared_before = pretrained.shared_digest();
    let mut target = target.clone();
    target.id = 0;
    let outcome = train_loop(model, std::slice::from_ref(&target), config)?;
    let shared_after = outcome.model.shared_digest();
    Ok(TransferOutcome {
        outcome,
        shared_before,
        shared_after,
    })
}
