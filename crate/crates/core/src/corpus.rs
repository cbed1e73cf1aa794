//! Parallel corpora: loading aligned line files, provenance tags, mixing,
//! language filtering, seeded splitting and length hygiene.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("source has {source_lines} lines but target has {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("dataset `{name}`: expected {expected} pairs, found {actual}")]
    ExpectedCountMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: invalid UTF-8 on line {line_no}")]
    InvalidUtf8 { path: PathBuf, line_no: usize },
    #[error("split needs {requested} pairs but the corpus has {available}")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl CorpusError {
    fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

/// Source-side language of a pair. The target side is always English.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Tigrinya,
    Amharic,
    Geez,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::Tigrinya, Language::Amharic, Language::Geez];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Tigrinya => "tigrinya",
            Language::Amharic => "amharic",
            Language::Geez => "geez",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tigrinya" | "tigrigna" | "ti" | "tir" => Ok(Language::Tigrinya),
            "amharic" | "am" | "amh" => Ok(Language::Amharic),
            "geez" | "ge'ez" | "gez" => Ok(Language::Geez),
            other => Err(format!("unknown language `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub dataset: Arc<str>,
    pub language: Language,
}

impl SentencePair {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        dataset: impl Into<Arc<str>>,
        language: Language,
    ) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            dataset: dataset.into(),
            language,
        }
    }

    pub fn source_tokens(&self) -> usize {
        self.source.split_whitespace().count()
    }

    pub fn target_tokens(&self) -> usize {
        self.target.split_whitespace().count()
    }
}

/// Ordered sentence pairs. Order matters; shuffling is explicit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SentencePair> {
        self.pairs.iter()
    }

    /// Writes aligned source/target line files, plus an optional
    /// `dataset<TAB>language` provenance file.
    pub fn write_aligned(
        &self,
        source_path: &Path,
        target_path: &Path,
        tags_path: Option<&Path>,
    ) -> Result<(), CorpusError> {
        write_lines(source_path, self.pairs.iter().map(|p| p.source.as_str()))?;
        write_lines(target_path, self.pairs.iter().map(|p| p.target.as_str()))?;
        if let Some(tags) = tags_path {
            let lines: Vec<String> = self
                .pairs
                .iter()
                .map(|p| format!("{}\t{}", p.dataset, p.language))
                .collect();
            write_lines(tags, lines.iter().map(String::as_str))?;
        }
        Ok(())
    }
}

impl FromIterator<SentencePair> for ParallelCorpus {
    fn from_iter<T: IntoIterator<Item = SentencePair>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

pub fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in lines {
        writeln!(out, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    out.flush().map_err(|e| CorpusError::io(path, e))
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub language: Language,
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_count: Option<usize>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.source_path == self.target_path {
            return Err(CorpusError::InvalidSpec(format!(
                "dataset `{}` uses the same file for source and target",
                self.name
            )));
        }
        if self.expected_count == Some(0) {
            return Err(CorpusError::InvalidSpec(format!(
                "dataset `{}` has expected_count = 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Declarative list of datasets, stored as TOML `[[dataset]]` tables.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "dataset", default)]
    pub datasets: Vec<DatasetSpec>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let mut manifest: Manifest = toml::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for spec in &mut manifest.datasets {
            spec.source_path = base.join(&spec.source_path);
            spec.target_path = base.join(&spec.target_path);
        }
        Ok(manifest)
    }

    pub fn load_all(&self) -> Result<Vec<ParallelCorpus>, CorpusError> {
        self.datasets.iter().map(load_parallel).collect()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, raw)| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            std::str::from_utf8(raw)
                .map(str::to_owned)
                .map_err(|_| CorpusError::InvalidUtf8 {
                    path: path.to_owned(),
                    line_no: i + 1,
                })
        })
        .collect()
}

/// Loads two aligned line files. Pairs where both sides are blank are dropped.
pub fn load_parallel(spec: &DatasetSpec) -> Result<ParallelCorpus, CorpusError> {
    spec.validate()?;
    let sources = read_lines(&spec.source_path)?;
    let targets = read_lines(&spec.target_path)?;
    if sources.len() != targets.len() {
        return Err(CorpusError::LineCountMismatch {
            source_lines: sources.len(),
            target_lines: targets.len(),
        });
    }
    let dataset: Arc<str> = Arc::from(spec.name.as_str());
    let corpus: ParallelCorpus = sources
        .into_iter()
        .zip(targets)
        .filter(|(s, t)| !(s.trim().is_empty() && t.trim().is_empty()))
        .map(|(s, t)| SentencePair::new(s, t, dataset.clone(), spec.language))
        .collect();
    if let Some(expected) = spec.expected_count {
        if expected != corpus.len() {
            return Err(CorpusError::ExpectedCountMismatch {
                name: spec.name.clone(),
                expected,
                actual: corpus.len(),
            });
        }
    }
    Ok(corpus)
}

/// Concatenates the corpora and shuffles the result with the seeded PRNG.
pub fn mix_and_shuffle(corpora: &[ParallelCorpus], seed: u64) -> ParallelCorpus {
    let mut pairs: Vec<SentencePair> = corpora.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
    rng::shuffle(&mut pairs, &mut rng::seeded(seed));
    ParallelCorpus::new(pairs)
}

pub fn filter_by_language(corpus: &ParallelCorpus, language: Language) -> ParallelCorpus {
    corpus
        .iter()
        .filter(|p| p.language == language)
        .cloned()
        .collect()
}

/// Train/dev/test partition produced by [`split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

pub const DEFAULT_TEST_SIZE: usize = 200;
pub const DEFAULT_DEV_SIZE: usize = 1000;

/// Draws `test_size` then `dev_size` pairs without replacement; the rest is
/// training data. Every part keeps the input's relative order.
pub fn split(
    corpus: &ParallelCorpus,
    test_size: usize,
    dev_size: usize,
    seed: u64,
) -> Result<Split, CorpusError> {
    let requested = test_size + dev_size;
    if requested > corpus.len() {
        return Err(CorpusError::SplitTooLarge {
            requested,
            available: corpus.len(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng::shuffle(&mut order, &mut rng::seeded(seed));

    // 0 = train, 1 = dev, 2 = test
    let mut role = vec![0u8; corpus.len()];
    for &i in &order[..test_size] {
        role[i] = 2;
    }
    for &i in &order[test_size..requested] {
        role[i] = 1;
    }
    let pick = |r: u8| -> ParallelCorpus {
        corpus
            .iter()
            .zip(&role)
            .filter(|(_, &x)| x == r)
            .map(|(p, _)| p.clone())
            .collect()
    };
    Ok(Split {
        train: pick(0),
        dev: pick(1),
        test: pick(2),
    })
}

pub const DEFAULT_MAX_LEN: usize = 200;
pub const DEFAULT_MAX_RATIO: f64 = 9.0;

/// Drops pairs with a side longer than `max_len` whitespace tokens or whose
/// token-count ratio exceeds `max_ratio`. An empty side against a non-empty
/// one counts as an unbounded ratio.
pub fn length_ratio_filter(corpus: &ParallelCorpus, max_len: usize, max_ratio: f64) -> ParallelCorpus {
    corpus
        .iter()
        .filter(|p| {
            let (s, t) = (p.source_tokens(), p.target_tokens());
            if s > max_len || t > max_len {
                return false;
            }
            let (lo, hi) = (s.min(t), s.max(t));
            match lo {
                0 => hi == 0,
                _ => hi as f64 / lo as f64 <= max_ratio,
            }
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn spec(dir: &Path, src: &str, tgt: &str) -> DatasetSpec {
        DatasetSpec {
            name: "toy".into(),
            language: Language::Tigrinya,
            source_path: write(dir, "src.txt", src),
            target_path: write(dir, "tgt.txt", tgt),
            expected_count: None,
        }
    }

    fn toy(n: usize, lang: Language, tag: &str) -> ParallelCorpus {
        (0..n)
            .map(|i| SentencePair::new(format!("s{i}"), format!("t{i}"), tag, lang))
            .collect()
    }

    fn sorted(c: &ParallelCorpus) -> Vec<SentencePair> {
        let mut v = c.pairs.clone();
        v.sort();
        v
    }

    #[test]
    fn load_aligned_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = load_parallel(&spec(dir.path(), "a\nb\nc\n", "x\ny\nz\n")).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs[1].source, "b");
        assert_eq!(c.pairs[1].target, "y");
        assert_eq!(&*c.pairs[1].dataset, "toy");
    }

    #[test]
    fn load_line_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_parallel(&spec(dir.path(), "a\nb\nc\n", "x\ny\n")).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::LineCountMismatch {
                source_lines: 3,
                target_lines: 2
            }
        ));
    }

    #[test]
    fn load_drops_blank_blank_pairs_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = load_parallel(&spec(dir.path(), "a\n\nc\nd\n\n", "x\n\nz\n\nv\n")).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.pairs[2].target, "");
    }

    #[test]
    fn load_expected_count_and_crlf() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path(), "a\r\nb\r\n", "x\r\ny\r\n");
        s.expected_count = Some(2);
        let c = load_parallel(&s).unwrap();
        assert_eq!(c.pairs[0].source, "a");
        s.expected_count = Some(3);
        assert!(matches!(
            load_parallel(&s),
            Err(CorpusError::ExpectedCountMismatch { expected: 3, actual: 2, .. })
        ));
    }

    #[test]
    fn load_invalid_utf8_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), "a\nb\n", "x\ny\n");
        fs::write(&s.source_path, b"ok\n\xff\xfe\n").unwrap();
        assert!(matches!(
            load_parallel(&s),
            Err(CorpusError::InvalidUtf8 { line_no: 2, .. })
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = DatasetSpec {
            name: "x".into(),
            language: Language::Geez,
            source_path: "same".into(),
            target_path: "same".into(),
            expected_count: None,
        };
        assert!(matches!(s.validate(), Err(CorpusError::InvalidSpec(_))));
        s.target_path = "other".into();
        s.expected_count = Some(0);
        assert!(matches!(s.validate(), Err(CorpusError::InvalidSpec(_))));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.ti", "ሰላም\n");
        write(dir.path(), "a.en", "hello\n");
        let m = write(
            dir.path(),
            "manifest.toml",
            "[[dataset]]\nname = \"a\"\nlanguage = \"tigrinya\"\nsource_path = \"a.ti\"\ntarget_path = \"a.en\"\nexpected_count = 1\n",
        );
        let manifest = Manifest::load(&m).unwrap();
        let corpora = manifest.load_all().unwrap();
        assert_eq!(corpora[0].pairs[0].target, "hello");
    }

    #[test]
    fn mix_preserves_multiset_and_is_deterministic() {
        let parts = [toy(30, Language::Amharic, "a"), toy(10, Language::Tigrinya, "t")];
        let m1 = mix_and_shuffle(&parts, 42);
        let m2 = mix_and_shuffle(&parts, 42);
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 40);
        let mut expected: Vec<SentencePair> = parts.iter().flat_map(|c| c.pairs.clone()).collect();
        expected.sort();
        assert_eq!(sorted(&m1), expected);
        assert_ne!(mix_and_shuffle(&parts, 43), m1);
    }

    #[test]
    fn mix_of_table_sized_corpora() {
        // Amharic 1M + Ge'ez 11K + Tigrinya 439K
        let parts = [
            toy(1_000_000, Language::Amharic, "am"),
            toy(11_000, Language::Geez, "gez"),
            toy(439_000, Language::Tigrinya, "ti"),
        ];
        let mixed = mix_and_shuffle(&parts, 1);
        assert_eq!(mixed.len(), 1_450_000);
        assert_eq!(filter_by_language(&mixed, Language::Tigrinya).len(), 439_000);
    }

    #[test]
    fn filter_keeps_order_and_tags() {
        let mixed = mix_and_shuffle(&[toy(5, Language::Amharic, "a"), toy(5, Language::Tigrinya, "t")], 3);
        let ti = filter_by_language(&mixed, Language::Tigrinya);
        assert_eq!(ti.len(), 5);
        assert!(ti.iter().all(|p| &*p.dataset == "t"));
        let positions: Vec<usize> = ti
            .iter()
            .map(|p| mixed.pairs.iter().position(|q| q == p).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(filter_by_language(&ti, Language::Geez).is_empty());
    }

    #[test]
    fn split_in_domain_sizes() {
        let c = toy(2500, Language::Tigrinya, "twb");
        let s = split(&c, DEFAULT_TEST_SIZE, 0, 9).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (2300, 0, 200));
        let mut union: Vec<SentencePair> = s.train.pairs.iter().chain(&s.dev.pairs).chain(&s.test.pairs).cloned().collect();
        union.sort();
        assert_eq!(union, sorted(&c));
        assert_eq!(split(&c, 200, 0, 9).unwrap(), s);
    }

    #[test]
    fn split_identity_and_errors() {
        let c = toy(10, Language::Tigrinya, "x");
        assert_eq!(split(&c, 0, 0, 1).unwrap().train, c);
        assert!(matches!(
            split(&c, 8, 3, 1),
            Err(CorpusError::SplitTooLarge { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn length_filter_examples() {
        let pair = |s: usize, t: usize| {
            SentencePair::new(vec!["w"; s].join(" "), vec!["w"; t].join(" "), "x", Language::Tigrinya)
        };
        let c = ParallelCorpus::new(vec![pair(5, 5), pair(1, 10), pair(0, 3), pair(201, 201), pair(2, 18)]);
        let kept = length_ratio_filter(&c, DEFAULT_MAX_LEN, DEFAULT_MAX_RATIO);
        assert_eq!(kept.pairs, vec![pair(5, 5), pair(2, 18)]);
        assert!(length_ratio_filter(&ParallelCorpus::default(), 200, 9.0).is_empty());
    }

    #[test]
    fn write_aligned_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy(4, Language::Amharic, "am");
        let (s, t, g) = (dir.path().join("s"), dir.path().join("t"), dir.path().join("g"));
        c.write_aligned(&s, &t, Some(&g)).unwrap();
        assert_eq!(fs::read_to_string(&g).unwrap().lines().next(), Some("am\tamharic"));
        let back = load_parallel(&DatasetSpec {
            name: "am".into(),
            language: Language::Amharic,
            source_path: s,
            target_path: t,
            expected_count: Some(4),
        })
        .unwrap();
        assert_eq!(back, c);
    }
}
