use std::collections::BTreeSet;

/// Percentage of mismatched predictions.
pub fn error_rate(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "prediction and gold lengths differ");
    if gold.is_empty() {
        return 0.0;
    }
    let wrong = pred.iter().zip(gold).filter(|(p, g)| p != g).count();
    100.0 * wrong as f64 / gold.len() as f64
}

/// Fraction of matching positions across all sentences.
pub fn token_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        total += g.len();
        right += p.iter().zip(g).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        0.0
    } else {
        right as f64 / total as f64
    }
}

/// Labelled span `(first, last, type)` with inclusive token positions.
pub type Span = (usize, usize, String);

/// True when tags follow a B-/I- chunk scheme.
pub fn is_chunk_scheme<S: AsRef<str>>(labels: &[S]) -> bool {
    labels
        .iter()
        .any(|l| l.as_ref().starts_with("B-") || l.as_ref().starts_with("I-"))
}

/// Chunks of a BIO sequence. An `I-X` that does not continue an `X` chunk
/// opens a new one.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let (prefix, kind) = match tag.split_once('-') {
            Some((p, k)) if p == "B" || p == "I" => (p, k),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && open.as_ref().is_some_and(|(_, k)| k == kind);
        if !continues {
            if let Some((start, k)) = open.take() {
                spans.push((start, i - 1, k));
            }
            if prefix != "O" {
                open = Some((i, kind.to_owned()));
            }
        }
    }
    if let Some((start, k)) = open {
        spans.push((start, tags.len() - 1, k));
    }
    spans
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match precision, recall and F1 over span sets.
pub fn span_prf(gold: &[Span], pred: &[Span]) -> Prf {
    let g: BTreeSet<&Span> = gold.iter().collect();
    let p: BTreeSet<&Span> = pred.iter().collect();
    let hit = g.intersection(&p).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { hit / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { hit / g.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// Corpus-level span scores; spans are keyed by sentence index.
pub fn corpus_span_prf<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Prf {
    let collect = |seqs: &[Vec<S>]| -> Vec<Span> {
        seqs.iter()
            .enumerate()
            .flat_map(|(n, tags)| {
                bio_spans(tags)
                    .into_iter()
                    .map(move |(a, b, k)| (a, b, format!("{n}:{k}")))
            })
            .collect()
    };
    span_prf(&collect(gold), &collect(pred))
}
