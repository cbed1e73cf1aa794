//! Byte-pair encoding: training, application, inversion and the model file.
//!
//! Words start as their characters plus a trailing end-of-word symbol. Training
//! repeatedly merges the most frequent adjacent pair (weighted by word count),
//! breaking ties by the lexicographically smallest `(left, right)`, with the
//! end-of-word marker ordered after every character.
//! Application replays the recorded merges in order, each merge rewriting
//! every adjacent occurrence before the next merge is considered.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::textnorm::{Script, TokenizedSentence};

pub const DEFAULT_EOW: &str = "</w>";
pub const FORMAT_VERSION: u32 = 1;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";
pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
pub const RESERVED: [&str; 4] = [UNK, BOS, EOS, PAD];

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("missing or malformed header (expected `#bpe v1 eow=<marker>`)")]
    BadHeader,
    #[error("unsupported bpe format version {0}")]
    UnsupportedVersion(u32),
    #[error("line {line}: expected `left right`")]
    BadMerge { line: usize },
    #[error("line {line}: duplicate merge `{left} {right}`")]
    DuplicateMerge {
        line: usize,
        left: String,
        right: String,
    },
}

/// Token frequency table used as BPE training input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCountTable {
    entries: BTreeMap<String, u64>,
}

impl WordCountTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: &str, count: u64) {
        if word.is_empty() || count == 0 {
            return;
        }
        *self.entries.entry(word.to_owned()).or_insert(0) += count;
    }

    pub fn get(&self, word: &str) -> Option<u64> {
        self.entries.get(word).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in lexicographic word order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.entries.iter().map(|(w, &c)| (w.as_str(), c))
    }
}

impl<S: AsRef<str>> FromIterator<(S, u64)> for WordCountTable {
    fn from_iter<T: IntoIterator<Item = (S, u64)>>(iter: T) -> Self {
        let mut table = Self::new();
        for (w, c) in iter {
            table.add(w.as_ref(), c);
        }
        table
    }
}

/// Exact token frequencies over a corpus.
pub fn count_words<'a, I>(corpus: I) -> WordCountTable
where
    I: IntoIterator<Item = &'a TokenizedSentence>,
{
    let mut table = WordCountTable::new();
    for sentence in corpus {
        for token in &sentence.tokens {
            table.add(token, 1);
        }
    }
    table
}

/// An ordered merge list plus the end-of-word marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    eow: String,
    version: u32,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, eow: impl Into<String>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self {
            merges,
            eow: eow.into(),
            version: FORMAT_VERSION,
            ranks,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), DEFAULT_EOW)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn eow_marker(&self) -> &str {
        &self.eow
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    /// Splits one word into subword symbols.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        symbols.push(self.eow.clone());

        // Replaying merges in order is equivalent to repeatedly applying the
        // lowest-ranked present pair whose rank exceeds the last one applied.
        let mut last_rank: Option<usize> = None;
        loop {
            let next = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .filter(|&r| last_rank.map_or(true, |l| r > l))
                .min();
            let Some(rank) = next else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_symbols(&symbols, left, right);
            last_rank = Some(rank);
        }
        symbols
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BpeError> {
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "#bpe v{} eow={}", self.version, self.eow)?;
        for (left, right) in &self.merges {
            writeln!(out, "{left} {right}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BpeError> {
        let file = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(file)
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self, BpeError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(BpeError::BadHeader)??;
        let rest = header.strip_prefix("#bpe v").ok_or(BpeError::BadHeader)?;
        let (version, eow) = rest.split_once(" eow=").ok_or(BpeError::BadHeader)?;
        let version: u32 = version.parse().map_err(|_| BpeError::BadHeader)?;
        if version != FORMAT_VERSION {
            return Err(BpeError::UnsupportedVersion(version));
        }
        if eow.is_empty() || eow.contains(char::is_whitespace) {
            return Err(BpeError::BadHeader);
        }

        let mut merges = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line_no = i + 2;
            let mut parts = line.split(' ');
            let (Some(left), Some(right), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(BpeError::BadMerge { line: line_no });
            };
            if left.is_empty() || right.is_empty() {
                return Err(BpeError::BadMerge { line: line_no });
            }
            let pair = (left.to_owned(), right.to_owned());
            if !seen.insert(pair.clone()) {
                return Err(BpeError::DuplicateMerge {
                    line: line_no,
                    left: pair.0,
                    right: pair.1,
                });
            }
            merges.push(pair);
        }
        Ok(Self::new(merges, eow))
    }
}

fn merge_symbols(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Interned symbol sequences for training.
struct Trainer<'a> {
    eow: &'a str,
    symbols: Vec<String>,
    /// Tie-break keys: the end-of-word marker is one symbol that sorts after
    /// every character.
    keys: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Trainer<'_> {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.lookup.get(s) {
            return id;
        }
        let id = self.symbols.len() as u32;
        let key = match s.strip_suffix(self.eow) {
            Some(body) => format!("{body}{}", char::MAX),
            None => s.to_owned(),
        };
        self.symbols.push(s.to_owned());
        self.keys.push(key);
        self.lookup.insert(s.to_owned(), id);
        id
    }
}

type Pair = (u32, u32);

fn add_pairs(word: &[u32], weight: i64, counts: &mut HashMap<Pair, i64>) {
    for w in word.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += weight;
    }
}

/// Learns up to `num_merges` merges from a word frequency table.
pub fn train_bpe(counts: &WordCountTable, num_merges: usize) -> BpeModel {
    train_bpe_with_marker(counts, num_merges, DEFAULT_EOW)
}

pub fn train_bpe_with_marker(counts: &WordCountTable, num_merges: usize, eow: &str) -> BpeModel {
    let mut trainer = Trainer {
        eow,
        symbols: Vec::new(),
        keys: Vec::new(),
        lookup: HashMap::new(),
    };
    let eow_id = trainer.intern(eow);

    let mut words: Vec<Vec<u32>> = Vec::with_capacity(counts.len());
    let mut freqs: Vec<i64> = Vec::with_capacity(counts.len());
    for (word, count) in counts.iter() {
        let mut seq: Vec<u32> = word
            .chars()
            .map(|c| trainer.intern(c.encode_utf8(&mut [0; 4])))
            .collect();
        seq.push(eow_id);
        words.push(seq);
        freqs.push(count as i64);
    }

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut occurs: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (idx, word) in words.iter().enumerate() {
        add_pairs(word, freqs[idx], &mut pair_counts);
        for w in word.windows(2) {
            occurs.entry((w[0], w[1])).or_default().insert(idx);
        }
    }

    let mut merges = Vec::new();
    let mut merged: HashSet<Pair> = HashSet::new();
    while merges.len() < num_merges {
        let best = pair_counts
            .iter()
            .filter(|&(_, &c)| c > 0)
            .filter(|(p, _)| !merged.contains(p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let a = (&trainer.keys[pa.0 as usize], &trainer.keys[pa.1 as usize]);
                    let b = (&trainer.keys[pb.0 as usize], &trainer.keys[pb.1 as usize]);
                    // smaller strings win ties, so they compare as greater
                    b.cmp(&a)
                })
            })
            .map(|(&p, _)| p);
        let Some((left, right)) = best else { break };

        let left_s = trainer.symbols[left as usize].clone();
        let right_s = trainer.symbols[right as usize].clone();
        let new_id = trainer.intern(&format!("{left_s}{right_s}"));
        merged.insert((left, right));
        merges.push((left_s, right_s));

        let affected: Vec<usize> = occurs
            .remove(&(left, right))
            .map(|set| {
                let mut v: Vec<usize> = set.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        for idx in affected {
            let word = &words[idx];
            if !word.windows(2).any(|w| w[0] == left && w[1] == right) {
                continue;
            }
            let mut rewritten = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
                    rewritten.push(new_id);
                    i += 2;
                } else {
                    rewritten.push(word[i]);
                    i += 1;
                }
            }
            add_pairs(word, -freqs[idx], &mut pair_counts);
            add_pairs(&rewritten, freqs[idx], &mut pair_counts);
            for w in rewritten.windows(2) {
                occurs.entry((w[0], w[1])).or_default().insert(idx);
            }
            words[idx] = rewritten;
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    BpeModel::new(merges, eow)
}

/// Segments every token of a sentence into subword symbols.
pub fn apply_bpe(sentence: &TokenizedSentence, model: &BpeModel) -> Vec<String> {
    sentence
        .tokens
        .iter()
        .flat_map(|t| model.encode_word(t))
        .collect()
}

/// Rebuilds words from subword symbols, closing a word at every symbol that
/// ends with `eow_marker`. A trailing word without the marker is kept as-is.
pub fn decode_bpe<S: AsRef<str>>(subwords: &[S], eow_marker: &str, script: Script) -> TokenizedSentence {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for symbol in subwords {
        let symbol = symbol.as_ref();
        match symbol.strip_suffix(eow_marker) {
            Some(stem) => {
                current.push_str(stem);
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            None => current.push_str(symbol),
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    TokenizedSentence::from_tokens(tokens, script)
}

/// Symbol inventory: the reserved symbols at ids 0..=3, then every symbol
/// `apply_bpe` produces over `counts`, by descending frequency then
/// lexicographically.
pub fn vocabulary(model: &BpeModel, counts: &WordCountTable) -> Vec<String> {
    let mut freq: HashMap<String, u64> = HashMap::new();
    for (word, count) in counts.iter() {
        for symbol in model.encode_word(word) {
            *freq.entry(symbol).or_insert(0) += count;
        }
    }
    let mut symbols: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(s, _)| !RESERVED.contains(&s.as_str()))
        .collect();
    symbols.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(symbols.into_iter().map(|(s, _)| s))
        .collect()
}

/// Symbol <-> id mapping over a vocabulary list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn symbol(&self, id: u32) -> &str {
        self.symbols.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Vec<u32> {
        symbols.iter().map(|s| self.id(s.as_ref())).collect()
    }

    /// Maps ids back to symbols, skipping the reserved control symbols.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != BOS_ID && id != EOS_ID && id != PAD_ID)
            .map(|&id| self.symbol(id).to_owned())
            .collect()
    }
}
