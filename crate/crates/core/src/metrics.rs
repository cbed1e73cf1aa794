//! Corpus-level MT evaluation over pre-tokenized text.
//!
//! * BLEU: clipped n-gram counts pooled over the corpus, geometric mean of the
//!   precisions times the brevity penalty. No smoothing. Orders for which the
//!   hypotheses contain no n-grams at all are left out of the mean.
//! * ChrF: character n-grams with whitespace removed, precision and recall
//!   pooled per order, averaged over orders, then combined into an F-beta.
//! * Meteor-lite: exact unigram matches only (no stemming or synonyms) with
//!   the usual fragmentation penalty. Not comparable to full Meteor.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no sentence pairs to score")]
    EmptyCorpus,
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("perplexity needs at least one token")]
    ZeroTokens,
    #[error("hypothesis has {hyp} lines but reference has {reference}")]
    LengthMismatch { hyp: usize, reference: usize },
}

/// One hypothesis/reference pair of token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> Self {
        Self {
            hypothesis: hypothesis.iter().map(|s| s.as_ref().to_owned()).collect(),
            reference: reference.iter().map(|s| s.as_ref().to_owned()).collect(),
        }
    }

    /// Splits two space-joined lines.
    pub fn from_lines(hypothesis: &str, reference: &str) -> Self {
        Self {
            hypothesis: hypothesis.split_whitespace().map(str::to_owned).collect(),
            reference: reference.split_whitespace().map(str::to_owned).collect(),
        }
    }
}

/// Pairs up two line lists (one sentence per line, tokens space-separated).
pub fn pairs_from_lines<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<Vec<EvalPair>, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyp: hyps.len(),
            reference: refs.len(),
        });
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| EvalPair::from_lines(h.as_ref(), r.as_ref()))
        .collect())
}

fn check(pairs: &[EvalPair]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    match pairs.iter().position(|p| p.reference.is_empty()) {
        Some(i) => Err(MetricError::EmptyReference(i)),
        None => Ok(()),
    }
}

fn ngram_counts<T: Eq + Hash>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && items.len() >= n {
        for gram in items.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// (clipped matches, hypothesis total, reference total) for one order.
fn overlap<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub const BLEU_MAX_N: usize = 4;

/// Corpus BLEU on a 0..=100 scale.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64, MetricError> {
    check(pairs)?;
    let max_n = max_n.max(1);
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        ref_len += p.reference.len();
        for n in 1..=max_n {
            let (m, t, _) = overlap(&p.hypothesis, &p.reference, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let orders: Vec<usize> = (0..max_n).filter(|&i| totals[i] > 0).collect();
    if orders.iter().any(|&i| matches[i] == 0) {
        return Ok(0.0);
    }
    let log_mean = orders
        .iter()
        .map(|&i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_mean.exp() * 100.0)
}

pub const CHRF_MAX_N: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Corpus ChrF on a 0..=100 scale.
pub fn chrf(pairs: &[EvalPair], max_n: usize, beta: f64) -> Result<f64, MetricError> {
    check(pairs)?;
    let max_n = max_n.max(1);
    let mut stats = vec![(0usize, 0usize, 0usize); max_n];
    for p in pairs {
        let hyp: Vec<char> = p.hypothesis.iter().flat_map(|t| t.chars()).filter(|c| !c.is_whitespace()).collect();
        let reference: Vec<char> = p.reference.iter().flat_map(|t| t.chars()).filter(|c| !c.is_whitespace()).collect();
        for n in 1..=max_n {
            let (m, h, r) = overlap(&hyp, &reference, n);
            let s = &mut stats[n - 1];
            s.0 += m;
            s.1 += h;
            s.2 += r;
        }
    }

    let (mut precision, mut recall, mut orders) = (0.0, 0.0, 0usize);
    for &(m, h, r) in &stats {
        if h == 0 && r == 0 {
            continue;
        }
        precision += if h > 0 { m as f64 / h as f64 } else { 0.0 };
        recall += if r > 0 { m as f64 / r as f64 } else { 0.0 };
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    precision /= orders as f64;
    recall /= orders as f64;
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + b2) * precision * recall / denom * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

/// For each hypothesis position, the reference position it aligns to.
/// Each hypothesis token takes the leftmost still-free identical reference token.
pub fn greedy_alignment<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    hyp.iter()
        .map(|h| {
            let j = reference
                .iter()
                .enumerate()
                .position(|(j, r)| !used[j] && r.as_ref() == h.as_ref())?;
            used[j] = true;
            Some(j)
        })
        .collect()
}

/// Number of maximal runs that are contiguous in both hypothesis and reference.
pub fn count_chunks(alignment: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for slot in alignment {
        match (*slot, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *slot;
    }
    chunks
}

/// Meteor-lite score of one sentence in `[0, 1]`.
pub fn meteor_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S], params: MeteorParams) -> f64 {
    let alignment = greedy_alignment(hyp, reference);
    let matches = alignment.iter().filter(|a| a.is_some()).count();
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
    let frag = count_chunks(&alignment) as f64 / m;
    let penalty = params.gamma * frag.powf(params.beta);
    f * (1.0 - penalty)
}

/// Corpus Meteor-lite on a 0..=100 scale: sentence scores averaged with
/// reference-length weights.
pub fn meteor_lite(pairs: &[EvalPair], params: MeteorParams) -> Result<f64, MetricError> {
    check(pairs)?;
    let (mut weighted, mut weight) = (0.0, 0.0);
    for p in pairs {
        let w = p.reference.len() as f64;
        weighted += w * meteor_sentence(&p.hypothesis, &p.reference, params);
        weight += w;
    }
    Ok(weighted / weight * 100.0)
}

/// `exp(nll_sum / token_count)` with the NLL in nats.
pub fn perplexity(nll_sum: f64, token_count: usize) -> Result<f64, MetricError> {
    if token_count == 0 {
        return Err(MetricError::ZeroTokens);
    }
    Ok((nll_sum / token_count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu,
    Chrf,
    Meteor,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Bleu, Metric::Chrf, Metric::Meteor];
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bleu" => Ok(Metric::Bleu),
            "chrf" => Ok(Metric::Chrf),
            "meteor" | "meteor_lite" => Ok(Metric::Meteor),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub system_name: String,
    pub bleu: Option<f64>,
    pub chrf: Option<f64>,
    pub meteor_lite: Option<f64>,
    pub perplexity: Option<f64>,
}

impl MetricReport {
    pub fn evaluate(system_name: &str, pairs: &[EvalPair], metrics: &[Metric]) -> Result<Self, MetricError> {
        check(pairs)?;
        let want = |m| metrics.contains(&m);
        Ok(Self {
            system_name: system_name.to_owned(),
            bleu: want(Metric::Bleu).then(|| bleu(pairs, BLEU_MAX_N)).transpose()?,
            chrf: want(Metric::Chrf).then(|| chrf(pairs, CHRF_MAX_N, CHRF_BETA)).transpose()?,
            meteor_lite: want(Metric::Meteor)
                .then(|| meteor_lite(pairs, MeteorParams::default()))
                .transpose()?,
            perplexity: None,
        })
    }

    pub fn with_perplexity(mut self, ppl: f64) -> Self {
        self.perplexity = Some(ppl);
        self
    }

    fn columns(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("bleu", self.bleu),
            ("chrf", self.chrf),
            ("meteor_lite", self.meteor_lite),
            ("ppl", self.perplexity),
        ]
    }

    /// `key=value` lines, one per present score, prefixed by the system name.
    pub fn key_values(&self) -> String {
        let mut out = format!("system={}\n", self.system_name);
        for (k, v) in self.columns() {
            if let Some(v) = v {
                let _ = writeln!(out, "{k}={v:.4}");
            }
        }
        out
    }
}

/// Renders reports as an aligned text table, one row per system.
pub fn render_table(reports: &[MetricReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let columns: Vec<&str> = first
        .columns()
        .iter()
        .map(|(k, _)| *k)
        .filter(|k| reports.iter().any(|r| r.columns().iter().any(|(k2, v)| k2 == k && v.is_some())))
        .collect();
    let name_width = reports
        .iter()
        .map(|r| r.system_name.chars().count())
        .max()
        .unwrap_or(0)
        .max("system".len());

    let mut out = format!("{:<name_width$}", "system");
    for c in &columns {
        let _ = write!(out, " | {c:>11}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_width + columns.len() * 14));
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<name_width$}", r.system_name);
        for c in &columns {
            let v = r.columns().into_iter().find(|(k, _)| k == c).and_then(|(_, v)| v);
            match v {
                Some(v) => {
                    let _ = write!(out, " | {v:>11.2}");
                }
                None => {
                    let _ = write!(out, " | {:>11}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_table(std::slice::from_ref(self)))
    }
}
