use serde::{Deserialize, Serialize};

use super::ModelError;

/// Transformer hyperparameters. `layers` applies to the encoder and the
/// decoder separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Filled in from the vocabularies when left at zero in config files.
    #[serde(default)]
    pub src_vocab: usize,
    #[serde(default)]
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_position: usize,
}

impl ModelConfig {
    /// 6+6 layers, 8 heads, width 512; the base Transformer's FFN width and
    /// regularization.
    pub fn base(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_position: 512,
        }
    }

    /// Laptop-sized model used for tests and the synthetic experiments.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 256,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_position: 256,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_position", self.max_position),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ModelError::InvalidConfig("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}
