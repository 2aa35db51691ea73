//! Corpora, vocabulary, pretrained embeddings and the synthetic task generator.

mod embeddings;
mod loaders;
pub mod synth;
mod vocab;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use embeddings::{load_pretrained, Coverage, EmbeddingTable};
pub use loaders::{format_conll_predictions, load_classification_tsv, load_conll, write_classification_tsv};
pub use synth::{gen_synthetic_tasks, SynthSpec};
pub use vocab::{build_vocab, Vocabulary, PAD, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Tagging,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TextLabel {
    Class(String),
    Tags(Vec<String>),
}

/// One raw sentence with its label, before indexing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSample {
    pub tokens: Vec<String>,
    pub label: TextLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// A task's raw text splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub kind: TaskKind,
    pub train: Vec<TextSample>,
    pub dev: Vec<TextSample>,
    pub test: Vec<TextSample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[TextSample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Reads `train`/`dev`/`test` files from a task directory. `*.tsv` files
    /// are classification data, `*.conll` files tagging data (token in column
    /// 0, tag in the last column). Only the train file is mandatory.
    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into());
        let (kind, ext) = if dir.join("train.tsv").is_file() {
            (TaskKind::Classification, "tsv")
        } else if dir.join("train.conll").is_file() {
            (TaskKind::Tagging, "conll")
        } else {
            return Err(Error::Data(format!(
                "{}: no train.tsv or train.conll",
                dir.display()
            )));
        };
        let load = |split: Split| -> Result<Vec<TextSample>> {
            let path = dir.join(format!("{}.{ext}", split.name()));
            if !path.is_file() {
                return Ok(Vec::new());
            }
            match kind {
                TaskKind::Classification => load_classification_tsv(&path),
                TaskKind::Tagging => load_conll(&path, 0, None),
            }
        };
        Ok(Corpus {
            name,
            kind,
            train: load(Split::Train)?,
            dev: load(Split::Dev)?,
            test: load(Split::Test)?,
        })
    }

    /// Writes the three splits as TSV files. Classification corpora only.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        if self.kind != TaskKind::Classification {
            return Err(Error::Data("only classification corpora can be written as TSV".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            write_classification_tsv(&dir.join(format!("{}.tsv", split.name())), self.split(split))?;
        }
        Ok(())
    }
}

/// Loads every task subdirectory of `root`, sorted by directory name.
pub fn load_task_dirs(root: &Path) -> Result<Vec<Corpus>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no task directories", root.display())));
    }
    dirs.iter().map(|d| Corpus::load_dir(d)).collect()
}

/// Label strings of one task, indexed densely.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelAlphabet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelAlphabet {
    fn from(labels: Vec<String>) -> Self {
        LabelAlphabet::new(labels)
    }
}

impl From<LabelAlphabet> for Vec<String> {
    fn from(a: LabelAlphabet) -> Self {
        a.labels
    }
}

impl LabelAlphabet {
    pub fn new(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        LabelAlphabet { labels, index }
    }

    /// All labels seen in the corpus: numeric order when every label is an
    /// unsigned integer, lexicographic otherwise.
    pub fn infer(corpus: &Corpus) -> Self {
        let mut seen: Vec<String> = Vec::new();
        for split in Split::ALL {
            for s in corpus.split(split) {
                match &s.label {
                    TextLabel::Class(c) => seen.push(c.clone()),
                    TextLabel::Tags(ts) => seen.extend(ts.iter().cloned()),
                }
            }
        }
        seen.sort();
        seen.dedup();
        if seen.iter().all(|l| l.parse::<u64>().is_ok()) {
            seen.sort_by_key(|l| l.parse::<u64>().expect("checked"));
        }
        Self::new(seen)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Tags(Vec<usize>),
}

/// An indexed sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
    pub label: Label,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An indexed task: label alphabet plus train/dev/test samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskDataset {
    pub id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub labels: LabelAlphabet,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    /// Indexes a corpus against a vocabulary. With `labels = None` the
    /// alphabet is inferred from the corpus.
    pub fn index(
        id: usize,
        corpus: &Corpus,
        vocab: &Vocabulary,
        labels: Option<&LabelAlphabet>,
    ) -> Result<TaskDataset> {
        if corpus.train.is_empty() {
            return Err(Error::Data(format!("task {}: empty train split", corpus.name)));
        }
        let labels = labels.cloned().unwrap_or_else(|| LabelAlphabet::infer(corpus));
        let convert = |s: &TextSample| -> Result<Sample> {
            let lookup = |l: &str| {
                labels.id(l).ok_or_else(|| {
                    Error::Data(format!("task {}: label {l:?} not in alphabet", corpus.name))
                })
            };
            let label = match (&s.label, corpus.kind) {
                (TextLabel::Class(c), TaskKind::Classification) => Label::Class(lookup(c)?),
                (TextLabel::Tags(ts), TaskKind::Tagging) => {
                    if ts.len() != s.tokens.len() {
                        return Err(Error::Data(format!(
                            "task {}: {} tags for {} tokens",
                            corpus.name,
                            ts.len(),
                            s.tokens.len()
                        )));
                    }
                    Label::Tags(ts.iter().map(|t| lookup(t)).collect::<Result<_>>()?)
                }
                _ => {
                    return Err(Error::Data(format!(
                        "task {}: label kind does not match task kind",
                        corpus.name
                    )))
                }
            };
            if s.tokens.is_empty() {
                return Err(Error::Data(format!("task {}: empty sentence", corpus.name)));
            }
            Ok(Sample {
                words: s.tokens.clone(),
                tokens: s.tokens.iter().map(|w| vocab.id(w)).collect(),
                label,
            })
        };
        let conv = |split: &[TextSample]| split.iter().map(convert).collect::<Result<Vec<_>>>();
        Ok(TaskDataset {
            id,
            name: corpus.name.clone(),
            kind: corpus.kind,
            train: conv(&corpus.train)?,
            dev: conv(&corpus.dev)?,
            test: conv(&corpus.test)?,
            labels,
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}
