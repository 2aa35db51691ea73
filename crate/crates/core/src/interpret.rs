//! Exports of recorded attention: per-token source-task rankings from the
//! complete graph and token-by-token retrieval matrices from the star graph.
//!
//! Two encodings are provided. Line-delimited JSON keeps full precision and
//! round-trips exactly. The TSV files are for plotting and carry six
//! significant digits:
//!
//! * `.attn.tsv`: per sentence, a header row of shared-position tokens (first
//!   cell empty), then one row per target token; sentences are separated by a
//!   blank line.
//! * `.topk.tsv`: one line per token, `token` then `task:weight` pairs;
//!   sentences are separated by a blank line.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::message::{CommMode, MessageTrace};

pub const DEFAULT_TOPK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportRows {
    /// Per token, `(source task, α)` in descending weight order.
    Ranked(Vec<Vec<(usize, f64)>>),
    /// Row `t` is `β_t` over the sentence's positions.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub task: usize,
    pub mode: CommMode,
    pub tokens: Vec<String>,
    pub rows: ExportRows,
}

impl AttentionExport {
    /// Largest `|Σ row − 1|` over all rows.
    pub fn max_row_deviation(&self) -> f64 {
        let sums: Vec<f64> = match &self.rows {
            ExportRows::Ranked(rows) => rows.iter().map(|r| r.iter().map(|p| p.1).sum()).collect(),
            ExportRows::Matrix(rows) => rows.iter().map(|r| r.iter().sum()).collect(),
        };
        sums.iter().fold(0.0, |m, s| m.max((s - 1.0).abs()))
    }
}

/// The `k` highest-α source tasks per token, ties broken by lower task id.
pub fn export_alpha_topk(trace: &MessageTrace, k: usize) -> Result<AttentionExport> {
    if trace.mode != CommMode::Cg {
        return Err(Error::contract(format!(
            "top-k export needs a complete-graph trace, got {}",
            trace.mode
        )));
    }
    if k == 0 || k > trace.sources.len() {
        return Err(Error::contract(format!(
            "k must be in 1..={}, got {k}",
            trace.sources.len()
        )));
    }
    let rows = trace
        .rows
        .iter()
        .map(|row| {
            let mut pairs: Vec<(usize, f64)> = trace.sources.iter().copied().zip(row.iter().copied()).collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            pairs.truncate(k);
            pairs
        })
        .collect();
    Ok(AttentionExport {
        task: trace.task,
        mode: trace.mode,
        tokens: trace.tokens.clone(),
        rows: ExportRows::Ranked(rows),
    })
}

/// The `T×T` retrieval matrix of a star-graph trace.
pub fn export_beta_matrix(trace: &MessageTrace) -> Result<AttentionExport> {
    if trace.mode != CommMode::Sg {
        return Err(Error::contract(format!(
            "matrix export needs a star-graph trace, got {}",
            trace.mode
        )));
    }
    let t = trace.tokens.len();
    if trace.rows.len() != t || trace.rows.iter().any(|r| r.len() != t) {
        return Err(Error::contract("trace is not a square token-by-token matrix"));
    }
    Ok(AttentionExport {
        task: trace.task,
        mode: trace.mode,
        tokens: trace.tokens.clone(),
        rows: ExportRows::Matrix(trace.rows.clone()),
    })
}

pub fn to_jsonl(exports: &[AttentionExport]) -> String {
    let mut out = String::new();
    for e in exports {
        let _ = writeln!(out, "{}", serde_json::to_string(e).expect("export serializes"));
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<AttentionExport>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Six significant digits, trailing zeros trimmed.
pub fn format_weight(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    }
}

/// Blank-line separated groups of `(line number, line)`.
fn blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut out = vec![Vec::new()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !out.last().expect("non-empty").is_empty() {
                out.push(Vec::new());
            }
        } else {
            out.last_mut().expect("non-empty").push((i + 1, line));
        }
    }
    out.retain(|b| !b.is_empty());
    out
}

fn parse_weight(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Data(format!("line {line}: bad weight {s:?}")))
}

/// `.attn.tsv` text for star-graph exports.
pub fn write_attn_tsv(exports: &[AttentionExport]) -> Result<String> {
    let mut out = String::new();
    for (n, e) in exports.iter().enumerate() {
        let ExportRows::Matrix(rows) = &e.rows else {
            return Err(Error::contract("attn.tsv holds matrix exports only"));
        };
        if n > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "\t{}", e.tokens.join("\t"));
        for (tok, row) in e.tokens.iter().zip(rows) {
            let cells: Vec<String> = row.iter().map(|&w| format_weight(w)).collect();
            let _ = writeln!(out, "{tok}\t{}", cells.join("\t"));
        }
    }
    Ok(out)
}

/// Parses `.attn.tsv`; `task` is attached to every export.
pub fn parse_attn_tsv(text: &str, task: usize) -> Result<Vec<AttentionExport>> {
    let mut out = Vec::new();
    for block in blocks(text) {
        let (first, head) = block[0];
        let header: Vec<&str> = head.split('\t').collect();
        if header.first() != Some(&"") {
            return Err(Error::Data(format!("line {first}: expected a header row")));
        }
        let tokens: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for &(line_no, line) in &block[1..] {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != tokens.len() + 1 {
                return Err(Error::Data(format!("line {line_no}: {} cells, expected {}", cells.len(), tokens.len() + 1)));
            }
            rows.push(cells[1..].iter().map(|c| parse_weight(c, line_no)).collect::<Result<Vec<_>>>()?);
        }
        if rows.len() != tokens.len() {
            return Err(Error::Data(format!("block at line {first}: matrix is not square")));
        }
        out.push(AttentionExport {
            task,
            mode: CommMode::Sg,
            tokens,
            rows: ExportRows::Matrix(rows),
        });
    }
    Ok(out)
}

/// `.topk.tsv` text for complete-graph exports; `names[i]` labels task `i`.
pub fn write_topk_tsv(exports: &[AttentionExport], names: &[String]) -> Result<String> {
    let mut out = String::new();
    for (n, e) in exports.iter().enumerate() {
        let ExportRows::Ranked(rows) = &e.rows else {
            return Err(Error::contract("topk.tsv holds ranked exports only"));
        };
        if n > 0 {
            out.push('\n');
        }
        for (tok, row) in e.tokens.iter().zip(rows) {
            out.push_str(tok);
            for &(src, w) in row {
                let name = names
                    .get(src)
                    .ok_or_else(|| Error::contract(format!("no name for task {src}")))?;
                let _ = write!(out, "\t{name}:{}", format_weight(w));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses `.topk.tsv`, mapping task names back to ids through `names`.
pub fn parse_topk_tsv(text: &str, task: usize, names: &[String]) -> Result<Vec<AttentionExport>> {
    let mut out = Vec::new();
    for block in blocks(text) {
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        for (line_no, line) in block {
            let mut cells = line.split('\t');
            tokens.push(cells.next().unwrap_or_default().to_owned());
            let row = cells
                .map(|c| {
                    let (name, w) = c
                        .rsplit_once(':')
                        .ok_or_else(|| Error::Data(format!("line {line_no}: expected task:weight, got {c:?}")))?;
                    let id = names
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| Error::Data(format!("line {line_no}: unknown task {name:?}")))?;
                    Ok((id, parse_weight(w, line_no)?))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        out.push(AttentionExport {
            task,
            mode: CommMode::Cg,
            tokens,
            rows: ExportRows::Ranked(rows),
        });
    }
    Ok(out)
}
