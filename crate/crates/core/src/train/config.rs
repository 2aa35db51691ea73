use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::message::CommMode;
use crate::model::{ModelConfig, EMBEDDING};

/// Every knob of a training run. Serialized as TOML; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: CommMode,
    pub hidden: usize,
    pub embed_dim: usize,
    /// 0 means "same as hidden".
    pub attn_dim: usize,
    pub init_range: f64,
    pub forget_bias: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-task loss weights; empty means 1.0 for every task.
    pub lambdas: Vec<f64>,
    /// Candidate weights for tagging tasks, for external sweeps.
    pub lambda_sweep: Vec<f64>,
    pub rho: f64,
    pub eps: f64,
    pub l2: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    /// Parameter-name prefixes held fixed during training.
    pub freeze: Vec<String>,
    pub freeze_embeddings: bool,
    pub stop_grad_messages: bool,
    pub shared_attention: bool,
    pub causal_attention: bool,
    /// Draw batches in size-proportional random order instead of strict round-robin.
    pub proportional: bool,
    pub min_count: usize,
    /// Worker threads for per-sample gradients and evaluation.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: CommMode::Sg,
            hidden: 200,
            embed_dim: 200,
            attn_dim: 0,
            init_range: 0.1,
            forget_bias: 1.0,
            batch_size: 8,
            epochs: 20,
            lambdas: Vec::new(),
            lambda_sweep: vec![1.0, 0.8, 0.5],
            rho: 0.95,
            eps: 1e-6,
            l2: 0.0,
            clip_norm: 5.0,
            patience: 5,
            seed: 1,
            freeze: Vec::new(),
            freeze_embeddings: false,
            stop_grad_messages: false,
            shared_attention: false,
            causal_attention: false,
            proportional: false,
            min_count: 1,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embed_dim must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.lambdas.iter().chain(&self.lambda_sweep).any(|&l| !(l > 0.0 && l.is_finite())) {
            return bad("task weights must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("need 0 <= rho < 1 and eps > 0");
        }
        if !(self.l2 >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("l2 and clip_norm must be >= 0");
        }
        if !(self.init_range > 0.0) {
            return bad("init_range must be > 0");
        }
        if self.jobs == 0 {
            return bad("jobs must be >= 1");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            attn_dim: self.attn_dim,
            init_range: self.init_range,
            forget_bias: self.forget_bias,
            shared_attention: self.shared_attention,
            causal_attention: self.causal_attention,
            stop_grad_messages: self.stop_grad_messages,
        }
    }

    /// Loss weight of task `k`.
    pub fn lambda(&self, k: usize) -> Result<f64> {
        if self.lambdas.is_empty() {
            return Ok(1.0);
        }
        self.lambdas
            .get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("no lambda given for task {k}")))
    }

    /// Freeze prefixes including the embedding when `freeze_embeddings` is set.
    pub fn freeze_set(&self) -> Vec<String> {
        let mut set = self.freeze.clone();
        if self.freeze_embeddings {
            set.push(EMBEDDING.to_owned());
        }
        set
    }
}
