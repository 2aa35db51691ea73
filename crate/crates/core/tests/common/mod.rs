#![allow(dead_code)]

use mtlgraph::data::{build_vocab, gen_synthetic_tasks, Corpus, SynthSpec, TaskDataset, Vocabulary};
use mtlgraph::train::TrainConfig;
use mtlgraph::{CommMode, Model, TaskInfo};

/// Synthetic corpora for `seed`, indexed over a vocabulary built from every
/// task's training split.
pub fn synth(spec: &SynthSpec, seed: u64) -> (Vec<Corpus>, Vocabulary, Vec<TaskDataset>) {
    let corpora = gen_synthetic_tasks(spec, seed).unwrap();
    let vocab = build_vocab(&corpora.iter().collect::<Vec<_>>(), 1).unwrap();
    let data = corpora
        .iter()
        .enumerate()
        .map(|(k, c)| TaskDataset::index(k, c, &vocab, None).unwrap())
        .collect();
    (corpora, vocab, data)
}

/// The chosen tasks renumbered `0..n`.
pub fn select(data: &[TaskDataset], tasks: &[usize]) -> Vec<TaskDataset> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut d = data[k].clone();
            d.id = i;
            d
        })
        .collect()
}

pub fn infos(data: &[TaskDataset]) -> Vec<TaskInfo> {
    data.iter()
        .map(|d| TaskInfo {
            name: d.name.clone(),
            kind: d.kind,
            labels: d.labels.clone(),
        })
        .collect()
}

pub fn model(cfg: &TrainConfig, vocab: &Vocabulary, data: &[TaskDataset]) -> Model {
    Model::new(cfg.model_config(), vocab.clone(), infos(data), cfg.seed).unwrap()
}

pub fn config(mode: CommMode, hidden: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        hidden,
        embed_dim: hidden,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}
