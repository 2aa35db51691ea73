//! Binary checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "TGMTLCK1"
//! manifest   u64 length, then that many bytes of UTF-8 JSON
//! count      u32 number of parameters
//! per parameter, in registration order:
//!   u32 name length, name bytes (UTF-8)
//!   u8  frozen flag (0 or 1)
//!   u32 rows, u32 cols
//!   rows·cols f64 values, row-major
//! ```
//!
//! The manifest records the format version, the training-config hash, the
//! shared and per-task namespaces, the model configuration, the vocabulary
//! and the task label sets. See `docs/checkpoint-format.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TaskInfo};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TGMTLCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    /// Parameter names under `shared/`.
    pub shared: Vec<String>,
    /// Per-task namespaces, `task/<k>`, in task order.
    pub task_namespaces: Vec<String>,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskInfo>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub config_hash: String,
}

pub fn encode(model: &Model, config_hash: &str) -> Vec<u8> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_owned(),
        shared: model.shared_names(),
        task_namespaces: (0..model.num_tasks()).map(|k| format!("task/{k}")).collect(),
        model: model.config.clone(),
        vocab: model.vocab.clone(),
        tasks: model.tasks.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.total_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.frozen));
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    // Rebuild the layout, then overwrite every value from the file.
    let mut model = Model::new(manifest.model, manifest.vocab, manifest.tasks, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model layout has {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_owned();
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen flag {b} for {name}"))),
        };
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
            Error::Checkpoint(format!("shape of {name} overflows"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model.params.id(&name).map_err(|_| {
            Error::Checkpoint(format!("unexpected parameter {name}"))
        })?;
        if id.index() != i {
            return Err(Error::Checkpoint(format!("parameter {name} out of order")));
        }
        let value = Tensor::new(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !value.is_finite() {
            return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")));
        }
        model
            .params
            .set_value(&name, value)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        model.params.get_mut(id).frozen = frozen;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    let shared = model.shared_names();
    if shared != manifest.shared {
        return Err(Error::Checkpoint("manifest shared namespace disagrees with parameters".into()));
    }
    Ok(Checkpoint {
        model,
        config_hash: manifest.config_hash,
    })
}

pub fn save(model: &Model, config_hash: &str, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// True when the model has a shared encoder to transfer, not just the
/// shared embedding table.
pub fn has_shared_encoder(model: &Model) -> bool {
    model.shared_names().iter().any(|n| n.starts_with("shared/lstm/"))
}
