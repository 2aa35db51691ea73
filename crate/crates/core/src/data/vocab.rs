use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id map shared by all tasks. Ids are dense; 0 is padding, 1 is unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Vec<String>> for Vocabulary {
    /// Rebuilds a frozen vocabulary from its id-ordered token list.
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            frozen: true,
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    /// Adds a token if absent. Returns `None` once frozen and the token is unseen.
    pub fn add(&mut self, token: &str) -> Option<usize> {
        if let Some(&id) = self.index.get(token) {
            return Some(id);
        }
        if self.frozen {
            return None;
        }
        Some(self.push(token))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One vocabulary over the training splits of every corpus, in first-seen
/// order. Tokens seen fewer than `min_count` times map to UNK.
pub fn build_vocab(corpora: &[&Corpus], min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for c in corpora {
        for s in &c.train {
            for t in &s.tokens {
                let n = counts.entry(t.as_str()).or_insert_with(|| {
                    order.push(t.as_str());
                    0
                });
                *n += 1;
            }
        }
    }
    if order.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut vocab = Vocabulary::new();
    for t in order {
        if counts[t] >= min_count.max(1) {
            vocab.add(t);
        }
    }
    vocab.freeze();
    Ok(vocab)
}
