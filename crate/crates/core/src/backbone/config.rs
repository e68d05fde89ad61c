use serde::{Deserialize, Serialize};

use crate::backbone::INIT_STD;
use crate::error::{Error, Result};

/// Architecture of the frozen encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the normal draw for weight matrices.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

/// Weight scale of [`BackboneConfig::tiny`] encoders. Large enough that
/// attention and the FFN mix token content into the first position.
pub const TINY_INIT_STD: f64 = 0.1;

fn default_init_std() -> f64 {
    INIT_STD
}

fn default_classes() -> usize {
    2
}

impl BackboneConfig {
    /// BERT-base geometry: 12 layers, width 768, FFN 3072, 12 heads.
    pub fn bert_base_shape() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            num_heads: 12,
            vocab_size: 30522,
            max_len: 512,
            num_classes: 2,
            seed: 0,
            init_std: INIT_STD,
        }
    }

    /// BERT-large geometry: 24 layers, width 1024, FFN 4096, 16 heads.
    pub fn bert_large_shape() -> Self {
        Self {
            num_layers: 24,
            hidden_dim: 1024,
            ffn_dim: 4096,
            num_heads: 16,
            ..Self::bert_base_shape()
        }
    }

    /// Desk-scale encoder used by the experiments and tests.
    pub fn tiny(num_layers: usize, hidden_dim: usize, ffn_dim: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            hidden_dim,
            ffn_dim,
            num_heads,
            vocab_size,
            max_len: 64,
            num_classes: 2,
            seed: 0,
            init_std: TINY_INIT_STD,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "bert-base-shape" => Ok(Self::bert_base_shape()),
            "bert-large-shape" => Ok(Self::bert_large_shape()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected bert-base-shape or bert-large-shape)"
            ))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.num_layers,
            self.hidden_dim,
            self.ffn_dim,
            self.num_heads,
            self.vocab_size,
            self.max_len,
            self.num_classes,
        ];
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std must be positive: {}", self.init_std)));
        }
        if extents.contains(&0) {
            return Err(Error::Config(format!("all extents must be ≥ 1: {self:?}")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}
