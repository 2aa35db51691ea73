//! Synthetic binary classification tasks with planted cross-task structure.
//!
//! Tasks are grouped by the connected components of the relatedness matrix.
//! Each group owns a lexicon of `shared_patterns` patterns that every task
//! in the group uses with the same polarity; each task also owns
//! `private_patterns` patterns of its own. A sentence is filler tokens with
//! exactly one planted pattern, and its class is that pattern's polarity
//! (flipped with probability `noise_rate`).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, TaskKind, TextLabel, TextSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub tasks: usize,
    /// Lexicon size of each related group.
    pub shared_patterns: usize,
    /// Lexicon size private to each task.
    pub private_patterns: usize,
    /// Probability that a sentence carries a private rather than a group pattern.
    pub private_fraction: f64,
    pub pattern_len: usize,
    /// `tasks × tasks`, symmetric, unit diagonal, entries 0 or 1. Empty means
    /// all tasks are related.
    pub relatedness: Vec<Vec<u8>>,
    /// Number of distinct filler tokens.
    pub filler_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub noise_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            tasks: 4,
            shared_patterns: 120,
            private_patterns: 10,
            private_fraction: 0.2,
            pattern_len: 1,
            relatedness: Vec::new(),
            filler_vocab: 200,
            min_len: 6,
            max_len: 12,
            train: 500,
            dev: 100,
            test: 400,
            noise_rate: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    fn related(&self, i: usize, j: usize) -> bool {
        self.relatedness.is_empty() || self.relatedness[i][j] == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tasks == 0 {
            return bad("synthetic spec needs at least one task".into());
        }
        if !self.relatedness.is_empty() {
            if self.relatedness.len() != self.tasks
                || self.relatedness.iter().any(|r| r.len() != self.tasks)
            {
                return bad(format!("relatedness must be {0}x{0}", self.tasks));
            }
            for i in 0..self.tasks {
                if self.relatedness[i][i] != 1 {
                    return bad("relatedness diagonal must be 1".into());
                }
                for j in 0..self.tasks {
                    let v = self.relatedness[i][j];
                    if v > 1 {
                        return bad("relatedness entries must be 0 or 1".into());
                    }
                    if v != self.relatedness[j][i] {
                        return bad("relatedness must be symmetric".into());
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.private_fraction) {
            return bad("private_fraction must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate must be in [0, 1)".into());
        }
        // Every lexicon a sentence may draw from must hold both polarities.
        if self.private_fraction < 1.0 && self.shared_patterns < 2 {
            return bad("shared_patterns must be >= 2 when group patterns are used".into());
        }
        if self.private_fraction > 0.0 && self.private_patterns < 2 {
            return bad("private_patterns must be >= 2 when private_fraction > 0".into());
        }
        if self.pattern_len == 0 || self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= pattern_len and 1 <= min_len <= max_len".into());
        }
        if self.pattern_len > self.max_len {
            return bad(format!(
                "pattern_len {} does not fit in max_len {}",
                self.pattern_len, self.max_len
            ));
        }
        if self.filler_vocab == 0 {
            return bad("filler_vocab must be >= 1".into());
        }
        if self.train == 0 {
            return bad("train split must be non-empty".into());
        }
        Ok(())
    }

    /// Group id of each task: the smallest task id in its connected component.
    pub fn groups(&self) -> Vec<usize> {
        let mut group: Vec<usize> = (0..self.tasks).collect();
        // Components are small; relax until stable.
        let mut changed = true;
        while changed {
            changed = false;
            for i in 0..self.tasks {
                for j in 0..self.tasks {
                    if self.related(i, j) && group[j] < group[i] {
                        group[i] = group[j];
                        changed = true;
                    }
                }
            }
        }
        group
    }
}

/// A planted pattern: its tokens and class polarity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub tokens: Vec<String>,
    pub polarity: usize,
}

fn make_patterns(prefix: &str, n: usize, len: usize) -> Vec<Pattern> {
    (0..n)
        .map(|j| Pattern {
            tokens: if len == 1 {
                vec![format!("{prefix}{j}")]
            } else {
                (0..len).map(|m| format!("{prefix}{j}_{m}")).collect()
            },
            polarity: j % 2,
        })
        .collect()
}

/// Group patterns used by task `task` (prefix `g<group>s`).
pub fn group_lexicon(spec: &SynthSpec, task: usize) -> Vec<Pattern> {
    let g = spec.groups()[task];
    make_patterns(&format!("g{g}s"), spec.shared_patterns, spec.pattern_len)
}

/// Patterns private to `task` (prefix `t<task>p`).
pub fn private_lexicon(spec: &SynthSpec, task: usize) -> Vec<Pattern> {
    make_patterns(&format!("t{task}p"), spec.private_patterns, spec.pattern_len)
}

fn sentence(
    spec: &SynthSpec,
    shared: &[Pattern],
    private: &[Pattern],
    rng: &mut ChaCha8Rng,
) -> TextSample {
    let class = rng.gen_range(0..2usize);
    let use_private = !private.is_empty() && rng.gen_bool(spec.private_fraction);
    let pool = if use_private { private } else { shared };
    let candidates: Vec<&Pattern> = pool.iter().filter(|p| p.polarity == class).collect();
    let pattern = candidates.choose(rng).expect("lexicon holds both polarities");

    let len = rng.gen_range(spec.min_len.max(spec.pattern_len)..=spec.max_len);
    let at = rng.gen_range(0..=len - spec.pattern_len);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| format!("w{}", rng.gen_range(0..spec.filler_vocab)))
        .collect();
    tokens[at..at + spec.pattern_len].clone_from_slice(&pattern.tokens);

    let label = if spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate) {
        1 - class
    } else {
        class
    };
    TextSample {
        tokens,
        label: TextLabel::Class(label.to_string()),
    }
}

/// `spec.tasks` classification corpora named `task<k>`; deterministic in `seed`.
pub fn gen_synthetic_tasks(spec: &SynthSpec, seed: u64) -> Result<Vec<Corpus>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.tasks);
    for k in 0..spec.tasks {
        let shared = if spec.private_fraction < 1.0 {
            group_lexicon(spec, k)
        } else {
            Vec::new()
        };
        let private = if spec.private_fraction > 0.0 {
            private_lexicon(spec, k)
        } else {
            Vec::new()
        };
        let mut gen = |n: usize| -> Vec<TextSample> {
            (0..n).map(|_| sentence(spec, &shared, &private, &mut rng)).collect()
        };
        let train = gen(spec.train);
        let dev = gen(spec.dev);
        let test = gen(spec.test);
        out.push(Corpus {
            name: format!("task{k}"),
            kind: TaskKind::Classification,
            train,
            dev,
            test,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            tasks: 3,
            shared_patterns: 6,
            private_patterns: 4,
            train: 30,
            dev: 5,
            test: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic_tasks(&small(), 7).unwrap();
        let b = gen_synthetic_tasks(&small(), 7).unwrap();
        let c = gen_synthetic_tasks(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_follow_patterns_without_noise() {
        let spec = small();
        let corpora = gen_synthetic_tasks(&spec, 3).unwrap();
        for (k, c) in corpora.iter().enumerate() {
            let mut lex = group_lexicon(&spec, k);
            lex.extend(private_lexicon(&spec, k));
            for s in &c.train {
                let hits: Vec<&Pattern> =
                    lex.iter().filter(|p| s.tokens.contains(&p.tokens[0])).collect();
                assert_eq!(hits.len(), 1);
                assert_eq!(s.label, TextLabel::Class(hits[0].polarity.to_string()));
            }
        }
    }

    #[test]
    fn pattern_longer_than_sentence_is_infeasible() {
        let spec = SynthSpec {
            pattern_len: 5,
            min_len: 2,
            max_len: 4,
            ..small()
        };
        assert!(gen_synthetic_tasks(&spec, 0).is_err());
    }

    #[test]
    fn relatedness_must_be_symmetric_with_unit_diagonal() {
        let asym = SynthSpec {
            relatedness: vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]],
            ..small()
        };
        assert!(asym.validate().is_err());
        let diag = SynthSpec {
            relatedness: vec![vec![0, 0, 0], vec![0, 1, 0], vec![0, 0, 1]],
            ..small()
        };
        assert!(diag.validate().is_err());
    }

    #[test]
    fn groups_follow_components() {
        let spec = SynthSpec {
            relatedness: vec![vec![1, 1, 0], vec![1, 1, 0], vec![0, 0, 1]],
            ..small()
        };
        assert_eq!(spec.groups(), vec![0, 0, 2]);
        assert_eq!(SynthSpec { tasks: 3, ..small() }.groups(), vec![0, 0, 0]);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let spec = small();
        assert_eq!(SynthSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(SynthSpec::from_toml("tasks = 2\nbogus = 1\n").is_err());
    }
}
