use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{TextLabel, TextSample};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `label<TAB>space-separated tokens`, one sample per line. Blank lines are skipped.
pub fn load_classification_tsv(path: &Path) -> Result<Vec<TextSample>> {
    parse_classification_tsv(&read(path)?, path)
}

pub(crate) fn parse_classification_tsv(text: &str, path: &Path) -> Result<Vec<TextSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "missing tab between label and text"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::parse(path, i + 1, "empty label"));
        }
        let tokens: Vec<String> = body.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            return Err(Error::parse(path, i + 1, "empty text"));
        }
        out.push(TextSample {
            tokens,
            label: TextLabel::Class(label.to_owned()),
        });
    }
    Ok(out)
}

pub fn write_classification_tsv(path: &Path, samples: &[TextSample]) -> Result<()> {
    let mut buf = String::new();
    for s in samples {
        let TextLabel::Class(label) = &s.label else {
            return Err(Error::Data("tag-sequence sample in a classification file".into()));
        };
        let _ = writeln!(buf, "{label}\t{}", s.tokens.join(" "));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// CoNLL-style columns with blank-line sentence breaks. `tag_col = None`
/// takes the last column. `-DOCSTART-` lines are ignored.
pub fn load_conll(path: &Path, token_col: usize, tag_col: Option<usize>) -> Result<Vec<TextSample>> {
    parse_conll(&read(path)?, path, token_col, tag_col)
}

pub(crate) fn parse_conll(
    text: &str,
    path: &Path,
    token_col: usize,
    tag_col: Option<usize>,
) -> Result<Vec<TextSample>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut width: Option<usize> = None;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, width: &mut Option<usize>| {
        if !tokens.is_empty() {
            out.push(TextSample {
                tokens: std::mem::take(tokens),
                label: TextLabel::Tags(std::mem::take(tags)),
            });
        }
        *width = None;
    };

    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut tags, &mut width);
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected {w} columns, found {}", cols.len()),
                ))
            }
            _ => {}
        }
        let tag_idx = tag_col.unwrap_or(cols.len() - 1);
        if token_col >= cols.len() || tag_idx >= cols.len() || token_col == tag_idx {
            return Err(Error::parse(
                path,
                i + 1,
                format!("token column {token_col} / tag column {tag_idx} unusable with {} columns", cols.len()),
            ));
        }
        tokens.push(cols[token_col].to_owned());
        tags.push(cols[tag_idx].to_owned());
    }
    flush(&mut tokens, &mut tags, &mut width);
    if out.is_empty() {
        return Err(Error::parse(path, 0, "no sentences"));
    }
    Ok(out)
}

/// Writes sentences in CoNLL columns `token gold predicted`.
pub fn format_conll_predictions(sentences: &[(Vec<String>, Vec<String>, Vec<String>)]) -> String {
    let mut buf = String::new();
    for (words, gold, pred) in sentences {
        for ((w, g), p) in words.iter().zip(gold).zip(pred) {
            let _ = writeln!(buf, "{w} {g} {p}");
        }
        buf.push('\n');
    }
    buf
}
