use std::fs;
use std::path::Path;

use rand::Rng;

use super::Vocabulary;
use crate::error::{Error, Result};
use crate::params::init_uniform;
use crate::tensor::Tensor;

/// `|V| × d` lookup table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub matched: usize,
    /// Vocabulary entries excluding the reserved ids.
    pub total: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Reads `token v_1 … v_d` lines; vocabulary rows without a vector are
/// drawn uniform from `[-range, range)`.
pub fn load_pretrained<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    range: f64,
    rng: &mut R,
) -> Result<(EmbeddingTable, Coverage)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pretrained(&text, path, vocab, dim, range, rng)
}

pub(crate) fn parse_pretrained<R: Rng + ?Sized>(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    range: f64,
    rng: &mut R,
) -> Result<(EmbeddingTable, Coverage)> {
    if dim == 0 {
        return Err(Error::contract("embedding dimension must be >= 1"));
    }
    let mut matrix = init_uniform(vocab.len(), dim, -range, range, rng)?;
    let mut seen = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, i + 1, format!("bad float: {e}")))?;
        if values.len() != dim {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, i + 1, "non-finite value"));
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        matrix.row_mut(id).copy_from_slice(&values);
        seen[id] = true;
    }
    let coverage = Coverage {
        matched: seen.iter().skip(2).filter(|&&s| s).count(),
        total: vocab.len().saturating_sub(2),
    };
    Ok((
        EmbeddingTable {
            matrix,
            trainable: true,
        },
        coverage,
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::new();
        v.add("good");
        v.add("bad");
        v.freeze();
        v
    }

    #[test]
    fn full_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text = "good 1 2 3\nbad -1 -2 -3\nother 0 0 0\n";
        let (t, cov) = parse_pretrained(text, Path::new("e"), &vocab(), 3, 0.1, &mut rng).unwrap();
        assert_eq!(cov.ratio(), 1.0);
        assert_eq!(t.matrix.row(2), &[1.0, 2.0, 3.0]);
        assert!(t.trainable);
    }

    #[test]
    fn empty_file_gives_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, cov) = parse_pretrained("", Path::new("e"), &vocab(), 200, 0.1, &mut rng).unwrap();
        assert_eq!(cov.ratio(), 0.0);
        assert_eq!(t.matrix.shape(), (4, 200));
        assert!(t.matrix.data().iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn dimension_mismatch_reports_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text = "good 1 2 3\nbad 1 2\n";
        match parse_pretrained(text, Path::new("e"), &vocab(), 3, 0.1, &mut rng) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
