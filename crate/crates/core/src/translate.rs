//! Text-level translation: Ge'ez source text in, detokenized English out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::model::{Checkpoint, ModelError};
use crate::subword::{apply_bpe, decode_bpe, BpeError, BpeModel, Vocab};
use crate::textnorm::{detokenize, tokenize_geez, tokenize_latin, Script};
use crate::trainer::EncodedCorpus;

pub const SRC_BPE_FILE: &str = "src.bpe";
pub const TGT_BPE_FILE: &str = "tgt.bpe";

#[derive(Debug, thiserror::Error)]
pub enum TranslateError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("input has {len} subword tokens; the model accepts at most {max}")]
    InputTooLong { len: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bpe model {path}: {source}")]
    Bpe { path: String, source: BpeError },
}

/// Tokenization, BPE and vocabulary lookup for both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub src_bpe: BpeModel,
    pub tgt_bpe: BpeModel,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

impl Codec {
    pub fn source_subwords(&self, text: &str) -> Vec<String> {
        apply_bpe(&tokenize_geez(text), &self.src_bpe)
    }

    pub fn target_subwords(&self, text: &str) -> Vec<String> {
        apply_bpe(&tokenize_latin(text), &self.tgt_bpe)
    }

    pub fn encode_source(&self, text: &str) -> Vec<u32> {
        self.src_vocab.encode(&self.source_subwords(text))
    }

    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        self.tgt_vocab.encode(&self.target_subwords(text))
    }

    /// Output ids back to English word tokens (control symbols dropped).
    pub fn decode_target(&self, ids: &[u32]) -> Vec<String> {
        let symbols = self.tgt_vocab.decode(ids);
        decode_bpe(&symbols, self.tgt_bpe.eow_marker(), Script::Latin).tokens
    }

    pub fn encode_corpus(&self, corpus: &ParallelCorpus) -> EncodedCorpus {
        EncodedCorpus {
            pairs: corpus
                .iter()
                .map(|p| (self.encode_source(&p.source), self.encode_target(&p.target)))
                .collect(),
        }
    }
}

/// Reference side of a corpus as the evaluation tokenizer sees it.
pub fn reference_tokens(text: &str) -> Vec<String> {
    tokenize_latin(text).tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Translation {
    pub translation: String,
    pub tokens: Vec<String>,
}

/// A loaded checkpoint with its subword models. Read-only after construction,
/// so one instance can serve many threads.
#[derive(Debug, Clone)]
pub struct Translator {
    checkpoint: Checkpoint,
    codec: Codec,
    model_id: String,
}

impl Translator {
    pub fn new(checkpoint: Checkpoint, src_bpe: BpeModel, tgt_bpe: BpeModel) -> Self {
        let model_id = checkpoint.model_id();
        let codec = Codec {
            src_bpe,
            tgt_bpe,
            src_vocab: checkpoint.src_vocab.clone(),
            tgt_vocab: checkpoint.tgt_vocab.clone(),
        };
        Self {
            checkpoint,
            codec,
            model_id,
        }
    }

    /// Loads a checkpoint; BPE paths default to `src.bpe`/`tgt.bpe` beside it.
    pub fn load(checkpoint: &Path, src_bpe: Option<&Path>, tgt_bpe: Option<&Path>) -> Result<Self, TranslateError> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let load_bpe = |given: Option<&Path>, default: &str| {
            let path = given.map(Path::to_path_buf).unwrap_or_else(|| dir.join(default));
            BpeModel::load(&path).map_err(|source| TranslateError::Bpe {
                path: path.display().to_string(),
                source,
            })
        };
        let src = load_bpe(src_bpe, SRC_BPE_FILE)?;
        let tgt = load_bpe(tgt_bpe, TGT_BPE_FILE)?;
        let ck = Checkpoint::load(checkpoint)?;
        Ok(Self::new(ck, src, tgt))
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn max_position(&self) -> usize {
        self.checkpoint.config().max_position
    }

    /// Default output cap: twice the source length plus slack, within the model's range.
    pub fn default_max_len(&self, src_len: usize) -> usize {
        (2 * src_len + 10).min(self.max_position())
    }

    /// Checks and encodes one input sentence.
    pub fn prepare(&self, text: &str) -> Result<Vec<u32>, TranslateError> {
        if text.trim().is_empty() {
            return Err(TranslateError::EmptyInput);
        }
        let ids = self.codec.encode_source(text);
        if ids.is_empty() {
            return Err(TranslateError::EmptyInput);
        }
        let len = ids.len() + 1;
        if len > self.max_position() {
            return Err(TranslateError::InputTooLong {
                len,
                max: self.max_position(),
            });
        }
        Ok(ids)
    }

    pub fn translate(&self, text: &str, max_len: Option<usize>) -> Result<Translation, TranslateError> {
        let ids = self.prepare(text)?;
        let cap = max_len.unwrap_or_else(|| self.default_max_len(ids.len()));
        let out = self.checkpoint.model.greedy_decode(&ids, cap)?;
        Ok(self.finish(&out))
    }

    /// Translates pre-encoded sources in one batched decode.
    pub fn translate_ids(&self, sources: &[Vec<u32>], max_len: usize) -> Result<Vec<Translation>, TranslateError> {
        let outs = self.checkpoint.model.greedy_decode_batch(sources, max_len)?;
        Ok(outs.iter().map(|o| self.finish(o)).collect())
    }

    fn finish(&self, ids: &[u32]) -> Translation {
        let tokens = self.codec.decode_target(ids);
        Translation {
            translation: detokenize(&tokens),
            tokens,
        }
    }
}
