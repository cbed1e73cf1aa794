//! One training stage: Adam under the warm-up schedule until the dev
//! perplexity stops improving.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::batching::{eval_batches, BatchStream, EncodedCorpus};
use super::early_stop::{early_stop_check, StopDecision, StopReason, TrainLog, ValidationRecord, DEFAULT_PATIENCE};
use super::optim::{adam_step, clip_grad_norm, AdamParams, LrSchedule, DEFAULT_CLIP_NORM};
use super::TrainError;
use crate::corpus::{filter_by_language, Language, Manifest, ParallelCorpus};
use crate::metrics::perplexity;
use crate::model::{Checkpoint, Mode, Model};
use crate::rng;

pub const DEFAULT_TOKEN_BATCH: usize = 4096;
pub const DEFAULT_VALIDATION_INTERVAL: u64 = 1000;
pub const DEFAULT_EVAL_TOKENS: usize = 4096;

/// Which pairs of a manifest a stage reads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSelector {
    pub manifest: PathBuf,
    /// Dataset names to keep; empty keeps every dataset.
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default)]
    pub language: Option<Language>,
}

impl CorpusSelector {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            datasets: Vec::new(),
            language: None,
        }
    }

    pub fn with_language(mut self, language: Language) -> Self {
        self.language = Some(language);
        self
    }

    pub(crate) fn resolve(&mut self, base: &Path) {
        self.manifest = base.join(&self.manifest);
    }

    /// Concatenates the selected datasets in manifest order.
    pub fn load(&self) -> Result<ParallelCorpus, TrainError> {
        let manifest = Manifest::load(&self.manifest)?;
        for wanted in &self.datasets {
            if !manifest.datasets.iter().any(|d| &d.name == wanted) {
                return Err(TrainError::ConfigInvalid(format!(
                    "dataset `{wanted}` is not listed in {}",
                    self.manifest.display()
                )));
            }
        }
        let mut pairs = Vec::new();
        for spec in &manifest.datasets {
            if self.datasets.is_empty() || self.datasets.contains(&spec.name) {
                pairs.extend(crate::corpus::load_parallel(spec)?.pairs);
            }
        }
        let corpus = ParallelCorpus::new(pairs);
        Ok(match self.language {
            Some(lang) => filter_by_language(&corpus, lang),
            None => corpus,
        })
    }
}

fn default_token_batch() -> usize {
    DEFAULT_TOKEN_BATCH
}
fn default_patience() -> usize {
    DEFAULT_PATIENCE
}
fn default_validation_interval() -> u64 {
    DEFAULT_VALIDATION_INTERVAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub train: CorpusSelector,
    pub dev: CorpusSelector,
    /// Padded tokens per batch, counted on the longer side.
    #[serde(default = "default_token_batch")]
    pub token_batch: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_validation_interval")]
    pub validation_interval: u64,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::ConfigInvalid(format!("stage `{}`: {what}", self.name)));
        if self.name.trim().is_empty() {
            return Err(TrainError::ConfigInvalid("stage name is empty".into()));
        }
        if self.token_batch == 0 {
            return bad("token_batch must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be at least 1");
        }
        Ok(())
    }
}

/// Settings shared by every stage of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub schedule: LrSchedule,
    pub adam: AdamParams,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Token budget for dev/test batches.
    pub eval_tokens: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            adam: AdamParams::default(),
            clip_norm: DEFAULT_CLIP_NORM,
            eval_tokens: DEFAULT_EVAL_TOKENS,
        }
    }
}

/// Teacher-forced perplexity with dropout and label smoothing off.
pub fn dev_perplexity(model: &Model<f32>, dev: &EncodedCorpus, eval_tokens: usize) -> Result<f64, TrainError> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for batch in eval_batches(dev, eval_tokens) {
        let stats = model.evaluate(&batch, 0.0)?;
        nll += stats.nll_sum;
        tokens += stats.tokens;
    }
    Ok(perplexity(nll, tokens)?)
}

fn check_ids(corpus: &EncodedCorpus, ck: &Checkpoint, what: &str) -> Result<(), TrainError> {
    let (sv, tv) = (ck.src_vocab.len() as u32, ck.tgt_vocab.len() as u32);
    let ok = corpus
        .pairs
        .iter()
        .all(|(s, t)| s.iter().all(|&i| i < sv) && t.iter().all(|&i| i < tv));
    if ok {
        Ok(())
    } else {
        Err(TrainError::VocabularyMismatch(format!("{what} corpus has ids outside the checkpoint vocabulary")))
    }
}

/// Trains `start` on `train`, validating on `dev` every
/// `validation_interval` steps (and once more at the end), and returns the
/// checkpoint from the best validation.
pub fn run_stage(
    start: &Checkpoint,
    stage: &StageConfig,
    train: &EncodedCorpus,
    dev: &EncodedCorpus,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    stage.validate()?;
    let mut log = TrainLog::default();
    if stage.max_steps == Some(0) {
        return Ok((start.clone(), log));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus(format!("stage `{}` training", stage.name)));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyCorpus(format!("stage `{}` dev", stage.name)));
    }
    check_ids(train, start, "training")?;
    check_ids(dev, start, "dev")?;

    let mut ck = start.clone();
    let d_model = ck.config().d_model;
    let label_smoothing = ck.config().label_smoothing;
    let mut dropout_rng = rng::seeded(stage.seed ^ 0xd1b5_4a32_d192_ed03);
    let mut batches = BatchStream::new(train, stage.token_batch, stage.seed);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut tokens_seen = 0u64;
    let mut local_step = 0u64;
    let mut last_validated = 0u64;

    let validate = |ck: &Checkpoint, local_step: u64, lr: f64, tokens_seen: u64, log: &mut TrainLog, best: &mut Option<(f64, Checkpoint)>| -> Result<(), TrainError> {
        let ppl = dev_perplexity(&ck.model, dev, opts.eval_tokens)?;
        let record = ValidationRecord {
            step: local_step,
            perplexity: ppl,
            lr,
            tokens_seen,
        };
        info!("[{}] {record}", stage.name);
        log.push(record);
        if best.as_ref().map_or(true, |(b, _)| ppl < *b) {
            *best = Some((ppl, ck.clone()));
        }
        Ok(())
    };

    let mut lr = 0.0;
    loop {
        if stage.max_steps.is_some_and(|m| local_step >= m) {
            log.stop_reason = Some(StopReason::MaxSteps);
            break;
        }
        let batch = batches.next().expect("non-empty corpus yields batches");
        let (_, mut grads) = ck.model.loss_and_gradients(&batch, label_smoothing, Mode::Train(&mut dropout_rng))?;
        clip_grad_norm(&mut grads, opts.clip_norm);
        local_step += 1;
        let lr_step = if opts.schedule.reset_per_stage {
            local_step
        } else {
            ck.optimizer.step + 1
        };
        lr = opts.schedule.lr(lr_step, d_model);
        adam_step(&mut ck.model, &grads, &mut ck.optimizer, lr, opts.adam)?;
        tokens_seen += batch.target_tokens() as u64;

        if local_step % stage.validation_interval == 0 {
            validate(&ck, local_step, lr, tokens_seen, &mut log, &mut best)?;
            last_validated = local_step;
            if let StopDecision::Stop { .. } = early_stop_check(&log.records, stage.patience) {
                log.stop_reason = Some(StopReason::EarlyStop);
                break;
            }
        }
    }
    if last_validated != local_step {
        validate(&ck, local_step, lr, tokens_seen, &mut log, &mut best)?;
    }
    log.best_step = log.best().map(|r| r.step);
    let (_, best_ck) = best.expect("at least one validation ran");
    Ok((best_ck, log))
}
