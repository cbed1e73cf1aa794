//! Transformer encoder-decoder: parameters, forward and backward passes,
//! greedy decoding and the checkpoint file format.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod tensor;
pub mod transformer;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::ModelConfig;
pub use tensor::{Scalar, Tensor};
pub use transformer::{loss, Batch, ForwardCache, Gradients, LossStats, Mode, Model};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence of length {len} exceeds max_position {max}")]
    PositionOverflow { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}
