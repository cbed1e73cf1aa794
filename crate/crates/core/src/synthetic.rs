//! Generated corpora with known structure: a copy task and a two-language
//! transfer task.
//!
//! The transfer task translates word by word into English pseudo-words.
//! Language A spells each English word with Ethiopic syllables; language B
//! is language A with a fixed set of consonant rows shifted to other rows, so
//! the two share most of their subwords but differ systematically.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{Language, ParallelCorpus, SentencePair};
use crate::model::ModelConfig;
use crate::rng::{self, Rng};
use crate::trainer::{BpeConfig, CorpusSelector, EvalConfig, LrSchedule, PipelineConfig, StageConfig};

/// Ethiopic consonant rows whose first seven vowel orders are all assigned.
const ROWS: [u32; 26] = [
    0x1200, 0x1208, 0x1210, 0x1218, 0x1228, 0x1230, 0x1238, 0x1240, 0x1260, 0x1270, 0x1278, 0x1290, 0x1298,
    0x12A0, 0x12A8, 0x12C8, 0x12D8, 0x12E8, 0x12F0, 0x1300, 0x1308, 0x1320, 0x1328, 0x1338, 0x1348, 0x1350,
];

/// Row index pairs `(from, to)` rewritten in language B.
const SHIFTED_ROWS: [(usize, usize); 6] = [(1, 4), (5, 6), (9, 10), (14, 16), (18, 21), (22, 24)];

const LATIN_ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const LATIN_VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn syllable(row: usize, order: usize) -> char {
    char::from_u32(ROWS[row] + order as u32).expect("table holds assigned code points")
}

/// Maps a language A word to its language B spelling.
pub fn shift_word(word: &str) -> String {
    word.chars()
        .map(|c| {
            let cp = c as u32;
            for &(from, to) in &SHIFTED_ROWS {
                let base = ROWS[from];
                if (base..base + 7).contains(&cp) {
                    return syllable(to, (cp - base) as usize);
                }
            }
            c
        })
        .collect()
}

fn unique_words(count: usize, rng: &mut Rng, mut make: impl FnMut(&mut Rng) -> String) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let w = make(rng);
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Zipf-like sampler over `n` ranks (weight `1 / (rank + 1)`).
struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let cumulative = (0..n)
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let x = rng::unit_f64(rng) * total;
        self.cumulative.partition_point(|&c| c <= x).min(self.cumulative.len() - 1)
    }
}

/// Sentences of pseudo-words copied verbatim to the target side.
pub fn copy_corpus(pairs: usize, vocab: usize, max_len: usize, seed: u64) -> ParallelCorpus {
    let mut rng = rng::seeded(seed);
    let words: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    (0..pairs)
        .map(|_| {
            let len = 1 + rng::index(&mut rng, max_len);
            let s: Vec<&str> = (0..len).map(|_| words[rng::index(&mut rng, vocab)].as_str()).collect();
            let line = s.join(" ");
            SentencePair::new(line.clone(), line, "copy", Language::Tigrinya)
        })
        .collect()
}

/// Lexicons and sentence sampler of the transfer task.
#[derive(Debug, Clone)]
pub struct TransferTask {
    pub english: Vec<String>,
    pub lang_a: Vec<String>,
    pub lang_b: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
}

impl TransferTask {
    pub fn new(words: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let english = unique_words(words, &mut rng, |r| {
            let n = 2 + rng::index(r, 2);
            (0..n)
                .map(|_| format!("{}{}", LATIN_ONSETS[rng::index(r, LATIN_ONSETS.len())], LATIN_VOWELS[rng::index(r, 5)]))
                .collect()
        });
        let lang_a = unique_words(words, &mut rng, |r| {
            let n = 2 + rng::index(r, 2);
            (0..n).map(|_| syllable(rng::index(r, ROWS.len()), rng::index(r, 7))).collect()
        });
        let lang_b = lang_a.iter().map(|w| shift_word(w)).collect();
        Self {
            english,
            lang_a,
            lang_b,
            min_len: 3,
            max_len: 8,
        }
    }

    /// `pairs` sentences in language A (`Amharic` tag) or B (`Tigrinya` tag).
    pub fn sample(&self, language: Language, pairs: usize, dataset: &str, seed: u64) -> ParallelCorpus {
        let lexicon = match language {
            Language::Amharic => &self.lang_a,
            _ => &self.lang_b,
        };
        let zipf = Zipf::new(self.english.len());
        let mut rng = rng::seeded(seed);
        (0..pairs)
            .map(|_| {
                let len = self.min_len + rng::index(&mut rng, self.max_len - self.min_len + 1);
                let ids: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng)).collect();
                let src: Vec<&str> = ids.iter().map(|&i| lexicon[i].as_str()).collect();
                let tgt: Vec<&str> = ids.iter().map(|&i| self.english[i].as_str()).collect();
                SentencePair::new(format!("{} ።", src.join(" ")), format!("{} .", tgt.join(" ")), dataset, language)
            })
            .collect()
    }
}

/// Sizes of the generated transfer data.
#[derive(Debug, Clone, Copy)]
pub struct TransferSizes {
    pub words: usize,
    pub lang_a: usize,
    pub lang_b: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for TransferSizes {
    fn default() -> Self {
        Self {
            words: 150,
            lang_a: 50_000,
            lang_b: 500,
            dev: 100,
            test: 200,
        }
    }
}

fn write_manifest(path: &Path, entries: &[(&str, Language, &str)]) -> std::io::Result<()> {
    let mut text = String::new();
    for (name, lang, stem) in entries {
        text.push_str(&format!(
            "[[dataset]]\nname = \"{name}\"\nlanguage = \"{}\"\nsource_path = \"{stem}.src\"\ntarget_path = \"{stem}.tgt\"\n\n",
            lang.as_str()
        ));
    }
    fs::write(path, text)
}

fn write_corpus(dir: &Path, stem: &str, corpus: &ParallelCorpus) -> std::io::Result<()> {
    let src: String = corpus.iter().map(|p| format!("{}\n", p.source)).collect();
    let tgt: String = corpus.iter().map(|p| format!("{}\n", p.target)).collect();
    fs::write(dir.join(format!("{stem}.src")), src)?;
    fs::write(dir.join(format!("{stem}.tgt")), tgt)
}

/// Manifests of a transfer task written to disk.
#[derive(Debug, Clone)]
pub struct TransferFiles {
    /// Language A and B training data.
    pub mix: PathBuf,
    /// Language B training data only.
    pub lang_b: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// Generates the task for `seed` and writes aligned files plus manifests.
pub fn write_transfer_task(dir: &Path, sizes: TransferSizes, seed: u64) -> std::io::Result<TransferFiles> {
    fs::create_dir_all(dir)?;
    let task = TransferTask::new(sizes.words, seed);
    let a = task.sample(Language::Amharic, sizes.lang_a, "lang-a", seed.wrapping_add(1));
    let b = task.sample(Language::Tigrinya, sizes.lang_b, "lang-b", seed.wrapping_add(2));
    let dev = task.sample(Language::Tigrinya, sizes.dev, "lang-b-dev", seed.wrapping_add(3));
    let test = task.sample(Language::Tigrinya, sizes.test, "lang-b-test", seed.wrapping_add(4));
    write_corpus(dir, "lang_a", &a)?;
    write_corpus(dir, "lang_b", &b)?;
    write_corpus(dir, "dev", &dev)?;
    write_corpus(dir, "test", &test)?;
    let files = TransferFiles {
        mix: dir.join("mix.toml"),
        lang_b: dir.join("lang_b.toml"),
        dev: dir.join("dev.toml"),
        test: dir.join("test.toml"),
    };
    write_manifest(&files.mix, &[("lang-a", Language::Amharic, "lang_a"), ("lang-b", Language::Tigrinya, "lang_b")])?;
    write_manifest(&files.lang_b, &[("lang-b", Language::Tigrinya, "lang_b")])?;
    write_manifest(&files.dev, &[("lang-b-dev", Language::Tigrinya, "dev")])?;
    write_manifest(&files.test, &[("lang-b-test", Language::Tigrinya, "test")])?;
    Ok(files)
}

/// Desk-scale two-stage schedule over a written transfer task: pretraining
/// on the A+B mix, then fine-tuning on B. Baseline mode trains on B alone.
pub fn transfer_pipeline(files: &TransferFiles, output_dir: &Path, seed: u64) -> PipelineConfig {
    let mut model = ModelConfig::desk(0, 0);
    model.max_position = 64;
    let stage = |name: &str, train: &Path, token_batch, max_steps, interval| StageConfig {
        name: name.into(),
        train: CorpusSelector::new(train),
        dev: CorpusSelector::new(&files.dev),
        token_batch,
        patience: 5,
        validation_interval: interval,
        max_steps: Some(max_steps),
        seed,
    };
    PipelineConfig {
        output_dir: output_dir.to_path_buf(),
        baseline_mode: false,
        seed,
        model,
        bpe: BpeConfig {
            src_merges: 200,
            tgt_merges: 200,
            corpus: None,
        },
        schedule: LrSchedule {
            warmup: 200,
            scale: 1.0,
            reset_per_stage: false,
        },
        adam: Default::default(),
        clip_norm: 5.0,
        evaluation: EvalConfig {
            test: CorpusSelector::new(&files.test),
            max_len: None,
            batch_tokens: 2048,
        },
        stages: vec![
            stage("multilingual", &files.mix, 400, 800, 100),
            stage("tigrinya", &files.lang_b, 200, 300, 50),
        ],
    }
}
