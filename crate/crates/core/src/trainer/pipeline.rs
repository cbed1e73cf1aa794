//! Multi-stage transfer pipeline: shared BPE, stage chaining, evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::optim::{AdamParams, LrSchedule, DEFAULT_CLIP_NORM};
use super::stage::{dev_perplexity, run_stage, CorpusSelector, StageConfig, TrainOptions, DEFAULT_EVAL_TOKENS};
use super::{EncodedCorpus, TrainError, TrainLog};
use crate::corpus::ParallelCorpus;
use crate::metrics::{render_table, EvalPair, Metric, MetricReport};
use crate::model::{Checkpoint, ModelConfig};
use crate::subword::{count_words, train_bpe, vocabulary, BpeModel, Vocab, WordCountTable};
use crate::textnorm::{tokenize_geez, tokenize_latin, TokenizedSentence};
use crate::translate::{reference_tokens, Codec, Translator, SRC_BPE_FILE, TGT_BPE_FILE};

pub const DEFAULT_MERGES: usize = 6000;

fn default_merges() -> usize {
    DEFAULT_MERGES
}
fn default_clip() -> f64 {
    DEFAULT_CLIP_NORM
}
fn default_eval_tokens() -> usize {
    DEFAULT_EVAL_TOKENS
}

/// Per-script subword models, both learned from one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpeConfig {
    #[serde(default = "default_merges")]
    pub src_merges: usize,
    #[serde(default = "default_merges")]
    pub tgt_merges: usize,
    /// Defaults to the first stage's training corpus, in baseline mode too,
    /// so both arms of an experiment share one vocabulary.
    #[serde(default)]
    pub corpus: Option<CorpusSelector>,
}

impl Default for BpeConfig {
    fn default() -> Self {
        Self {
            src_merges: DEFAULT_MERGES,
            tgt_merges: DEFAULT_MERGES,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub test: CorpusSelector,
    /// Decode cap; defaults to twice the source length plus ten.
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default = "default_eval_tokens")]
    pub batch_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Skip the first (multilingual) stage.
    #[serde(default)]
    pub baseline_mode: bool,
    /// Parameter initialization seed.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub bpe: BpeConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub evaluation: EvalConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
}

impl PipelineConfig {
    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, TrainError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(c) = cfg.bpe.corpus.as_mut() {
            c.resolve(base);
        }
        cfg.evaluation.test.resolve(base);
        for s in &mut cfg.stages {
            s.train.resolve(base);
            s.dev.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::ConfigInvalid("at least one stage is required".into()));
        }
        if self.baseline_mode && self.stages.len() < 2 {
            return Err(TrainError::ConfigInvalid("baseline mode needs a stage after the multilingual one".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()?;
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return Err(TrainError::ConfigInvalid(format!("duplicate stage name `{}`", s.name)));
            }
        }
        let mut m = self.model.clone();
        m.src_vocab = m.src_vocab.max(1);
        m.tgt_vocab = m.tgt_vocab.max(1);
        m.validate()?;
        if self.evaluation.batch_tokens == 0 {
            return Err(TrainError::ConfigInvalid("evaluation.batch_tokens must be at least 1".into()));
        }
        Ok(())
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            schedule: self.schedule,
            adam: self.adam,
            clip_norm: self.clip_norm,
            eval_tokens: self.evaluation.batch_tokens,
        }
    }

    /// Stages actually trained, honoring baseline mode.
    pub fn active_stages(&self) -> &[StageConfig] {
        if self.baseline_mode {
            &self.stages[1..]
        } else {
            &self.stages
        }
    }

    fn artifact_prefix(&self) -> &'static str {
        if self.baseline_mode {
            "baseline-"
        } else {
            ""
        }
    }
}

/// Result of one trained stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub name: String,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub report: MetricReport,
}

struct CorpusCache(HashMap<CorpusSelector, ParallelCorpus>);

impl CorpusCache {
    fn get(&mut self, sel: &CorpusSelector) -> Result<&ParallelCorpus, TrainError> {
        if !self.0.contains_key(sel) {
            let corpus = sel.load()?;
            self.0.insert(sel.clone(), corpus);
        }
        Ok(&self.0[sel])
    }
}

fn learn_side(sentences: impl Iterator<Item = TokenizedSentence>, merges: usize) -> (BpeModel, Vocab) {
    let sentences: Vec<TokenizedSentence> = sentences.collect();
    let counts: WordCountTable = count_words(&sentences);
    let model = train_bpe(&counts, merges);
    let vocab = Vocab::new(vocabulary(&model, &counts));
    (model, vocab)
}

/// Learns the source (Ge'ez) and target (Latin) subword models and vocabularies.
pub fn build_codec(corpus: &ParallelCorpus, bpe: &BpeConfig) -> Codec {
    let (src_bpe, src_vocab) = learn_side(corpus.iter().map(|p| tokenize_geez(&p.source)), bpe.src_merges);
    let (tgt_bpe, tgt_vocab) = learn_side(corpus.iter().map(|p| tokenize_latin(&p.target)), bpe.tgt_merges);
    Codec {
        src_bpe,
        tgt_bpe,
        src_vocab,
        tgt_vocab,
    }
}

/// Decodes the test sources greedily and scores the output, adding
/// teacher-forced test perplexity.
pub fn evaluate_checkpoint(
    name: &str,
    translator: &Translator,
    test: &ParallelCorpus,
    max_len: Option<usize>,
    batch_tokens: usize,
) -> Result<MetricReport, TrainError> {
    let codec = translator.codec();
    let max_pos = translator.max_position();
    let mut items: Vec<(Vec<u32>, Vec<String>)> = Vec::new();
    for p in test.iter() {
        let reference = reference_tokens(&p.target);
        if reference.is_empty() {
            warn!("skipping test pair with an empty reference");
            continue;
        }
        let mut src = codec.encode_source(&p.source);
        src.truncate(max_pos - 1);
        items.push((src, reference));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| items[i].0.len());
    let mut hyps: Vec<Vec<String>> = vec![Vec::new(); items.len()];
    for chunk in order.chunks(64) {
        let sources: Vec<Vec<u32>> = chunk.iter().map(|&i| items[i].0.clone()).collect();
        let longest = sources.iter().map(Vec::len).max().unwrap_or(0);
        let cap = max_len.unwrap_or_else(|| translator.default_max_len(longest)).min(max_pos);
        for (&i, t) in chunk.iter().zip(translator.translate_ids(&sources, cap)?) {
            hyps[i] = t.tokens;
        }
    }
    let pairs: Vec<EvalPair> = hyps.iter().zip(&items).map(|(h, (_, r))| EvalPair::new(h, r)).collect();
    let report = MetricReport::evaluate(name, &pairs, &[Metric::Bleu, Metric::Chrf, Metric::Meteor])?;

    let encoded = EncodedCorpus {
        pairs: test
            .iter()
            .map(|p| (codec.encode_source(&p.source), codec.encode_target(&p.target)))
            .filter(|(s, t)| s.len() < max_pos && t.len() < max_pos)
            .collect(),
    };
    Ok(if encoded.is_empty() {
        report
    } else {
        report.with_perplexity(dev_perplexity(&translator.checkpoint().model, &encoded, batch_tokens)?)
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), TrainError> {
    fs::write(path, contents).map_err(|e| TrainError::io(path, e))
}

/// Runs every active stage in order, each starting from the previous
/// stage's best checkpoint, and scores each result on the test set.
///
/// Writes `src.bpe`, `tgt.bpe`, and per stage `<name>.ckpt` and `<name>.log`
/// (prefixed `baseline-` in baseline mode) plus a `report.txt` table into
/// the output directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Vec<StageOutcome>, TrainError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    let mut cache = CorpusCache(HashMap::new());

    let bpe_source = config.bpe.corpus.clone().unwrap_or_else(|| config.stages[0].train.clone());
    let bpe_corpus = cache.get(&bpe_source)?;
    if bpe_corpus.is_empty() {
        return Err(TrainError::EmptyCorpus("bpe".into()));
    }
    let codec = build_codec(bpe_corpus, &config.bpe);
    info!(
        "subword vocabularies: {} source, {} target symbols",
        codec.src_vocab.len(),
        codec.tgt_vocab.len()
    );
    codec.src_bpe.save(out.join(SRC_BPE_FILE))?;
    codec.tgt_bpe.save(out.join(TGT_BPE_FILE))?;

    let test = cache.get(&config.evaluation.test)?.clone();
    if test.is_empty() {
        return Err(TrainError::EmptyCorpus("test".into()));
    }
    let mut current = Checkpoint::init(config.model.clone(), codec.src_vocab.clone(), codec.tgt_vocab.clone(), config.seed)?;
    let opts = config.options();
    let prefix = config.artifact_prefix();
    let mut outcomes = Vec::new();
    for stage in config.active_stages() {
        let train = codec.encode_corpus(cache.get(&stage.train)?);
        let dev = codec.encode_corpus(cache.get(&stage.dev)?);
        let train = drop_overlong(train, config.model.max_position, &stage.name);
        let dev = drop_overlong(dev, config.model.max_position, &stage.name);
        info!("stage `{}`: {} training pairs, {} dev pairs", stage.name, train.len(), dev.len());
        let (best, log) = run_stage(&current, stage, &train, &dev, &opts)?;
        best.save(out.join(format!("{prefix}{}.ckpt", stage.name)))?;
        write_file(&out.join(format!("{prefix}{}.log", stage.name)), log.lines())?;

        let system = format!("{prefix}{}", stage.name);
        let translator = Translator::new(best.clone(), codec.src_bpe.clone(), codec.tgt_bpe.clone());
        let report = evaluate_checkpoint(&system, &translator, &test, config.evaluation.max_len, opts.eval_tokens)?;
        info!("{}", report.key_values().replace('\n', " "));
        outcomes.push(StageOutcome {
            name: stage.name.clone(),
            checkpoint: best.clone(),
            log,
            report,
        });
        current = best;
    }
    let reports: Vec<MetricReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    write_file(&out.join(format!("{prefix}report.txt")), render_table(&reports))?;
    Ok(outcomes)
}

/// Pairs whose source or target (plus its control symbol) would not fit the
/// position table are left out of training.
fn drop_overlong(corpus: EncodedCorpus, max_position: usize, stage: &str) -> EncodedCorpus {
    let before = corpus.len();
    let pairs: Vec<_> = corpus
        .pairs
        .into_iter()
        .filter(|(s, t)| s.len() < max_position && t.len() < max_position)
        .collect();
    if pairs.len() < before {
        warn!("stage `{stage}`: dropped {} pairs longer than max_position", before - pairs.len());
    }
    EncodedCorpus { pairs }
}

/// Baseline run (first stage skipped) followed by the full staged run.
/// The first row is the baseline's final stage; the rest are the staged rows.
pub fn run_experiment(config: &PipelineConfig) -> Result<(Vec<StageOutcome>, Vec<StageOutcome>, Vec<MetricReport>), TrainError> {
    let mut baseline_cfg = config.clone();
    baseline_cfg.baseline_mode = true;
    let mut staged_cfg = config.clone();
    staged_cfg.baseline_mode = false;
    let baseline = run_pipeline(&baseline_cfg)?;
    let staged = run_pipeline(&staged_cfg)?;
    let mut rows = Vec::with_capacity(staged.len() + 1);
    let mut base_row = baseline.last().expect("baseline has a stage").report.clone();
    base_row.system_name = "baseline".into();
    rows.push(base_row);
    rows.extend(staged.iter().map(|o| o.report.clone()));
    write_file(&config.output_dir.join("experiment.txt"), render_table(&rows))?;
    Ok((baseline, staged, rows))
}
