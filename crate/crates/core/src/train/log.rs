use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only training record, written as line-delimited JSON.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, epoch: usize, task: &str, split: &str, metric: &str, value: f64) {
        debug_assert!(self.records.last().map_or(true, |r| r.epoch <= epoch));
        self.records.push(LogRecord {
            epoch,
            task: task.to_owned(),
            split: split.to_owned(),
            metric: metric.to_owned(),
            value,
        });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad log record: {e}"))))
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Values of one series in epoch order.
    pub fn series(&self, task: &str, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.task == task && r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect()
    }
}
