//! Token-batched training, early stopping and the staged transfer pipeline.

pub mod batching;
pub mod early_stop;
pub mod optim;
pub mod pipeline;
pub mod stage;

pub use batching::{eval_batches, make_token_batches, plan_token_batches, BatchStream, EncodedCorpus};
pub use early_stop::{early_stop_check, StopDecision, StopReason, TrainLog, ValidationRecord, DEFAULT_PATIENCE};
pub use optim::{adam_step, adam_update, clip_grad_norm, noam_lr, AdamParams, LrSchedule};
pub use pipeline::{
    evaluate_checkpoint, run_experiment, run_pipeline, BpeConfig, EvalConfig, PipelineConfig, StageOutcome,
};
pub use stage::{dev_perplexity, run_stage, CorpusSelector, StageConfig, TrainOptions};

use std::path::PathBuf;

use crate::corpus::CorpusError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::subword::BpeError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Translate(#[from] crate::translate::TranslateError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("{0} corpus is empty")]
    EmptyCorpus(String),
    #[error("invalid pipeline config: {0}")]
    ConfigInvalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
