//! Decoder-only transformer (target and small model) and the deep linear network.

mod deep_linear;
mod params;
mod transformer;

pub use deep_linear::DeepLinearNet;
pub use params::Params;
pub use transformer::{ForwardPass, HiddenStates, TransformerModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RMSNorm epsilon inside the root-mean-square.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    /// `silu(x·W_gate) ⊙ (x·W_up)` followed by the down projection.
    Swiglu,
}

fn default_true() -> bool {
    true
}

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub activation: Activation,
    pub max_seq_len: usize,
    /// Output head shares the embedding table.
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelConfig {
    /// Desk-scale target model: 8 layers, width 128.
    pub fn desk_target(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 128,
            intermediate_size: 256,
            num_layers: 8,
            num_heads: 4,
            num_kv_heads: 2,
            activation: Activation::Swiglu,
            max_seq_len: 64,
            tie_embeddings: true,
            rope_base: default_rope_base(),
        }
    }

    /// Desk-scale small model: 4 layers, width 64.
    pub fn desk_small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_size: 64,
            intermediate_size: 128,
            num_layers: 4,
            num_heads: 4,
            num_kv_heads: 4,
            activation: Activation::Swiglu,
            max_seq_len: 64,
            tie_embeddings: true,
            rope_base: default_rope_base(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.num_layers < 1 {
            return fail("num_layers must be >= 1".into());
        }
        if self.hidden_size == 0 || self.intermediate_size == 0 || self.max_seq_len == 0 {
            return fail("hidden_size, intermediate_size and max_seq_len must be positive".into());
        }
        if self.num_heads == 0 || self.num_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return fail(format!(
                "num_heads {} not divisible by num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            ));
        }
        if self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if !(self.rope_base > 0.0) {
            return fail("rope_base must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_size;
        let ff = self.intermediate_size;
        let ffn_mats = if self.activation == Activation::Swiglu { 3 } else { 2 };
        let per_layer = 2 * d + d * d + 2 * d * self.kv_dim() + d * d + ffn_mats * d * ff;
        let head = if self.tie_embeddings { 0 } else { self.vocab_size * d };
        self.vocab_size * d + self.num_layers * per_layer + d + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk_target(16);
        assert!(c.validate().is_ok());
        c.num_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_target(1);
        assert!(c.validate().is_err());
        c.vocab_size = 2;
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let json = r#"{"vocab_size":2,"hidden_size":8,"intermediate_size":8,"num_layers":1,
            "num_heads":2,"num_kv_heads":2,"activation":"swiglu","max_seq_len":8,"hiden":3}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }
}
