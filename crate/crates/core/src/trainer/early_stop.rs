//! Validation records and the perplexity-patience stopping rule.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const DEFAULT_PATIENCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub perplexity: f64,
    pub lr: f64,
    pub tokens_seen: u64,
}

impl fmt::Display for ValidationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} ppl={} lr={}", self.step, self.perplexity, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<ValidationRecord>,
    pub stop_reason: Option<StopReason>,
    pub best_step: Option<u64>,
}

impl TrainLog {
    pub fn push(&mut self, record: ValidationRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "validation steps must increase");
        }
        self.records.push(record);
    }

    pub fn best(&self) -> Option<&ValidationRecord> {
        best_index(&self.records).map(|i| &self.records[i])
    }

    /// One `step=<n> ppl=<x> lr=<x>` line per validation.
    pub fn lines(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Index of the earliest minimum perplexity.
fn best_index(records: &[ValidationRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
            Some((_, p)) if p <= r.perplexity => best,
            _ => Some((i, r.perplexity)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_step: u64 },
}

/// Stops once each of the latest `patience` validations fails to beat the
/// best perplexity recorded before them; ties count as no improvement.
/// On stop, reports the step of the (earliest) best validation.
pub fn early_stop_check(records: &[ValidationRecord], patience: usize) -> StopDecision {
    let patience = patience.max(1);
    if records.len() <= patience {
        return StopDecision::Continue;
    }
    let (before, recent) = records.split_at(records.len() - patience);
    let best_before = before.iter().map(|r| r.perplexity).fold(f64::INFINITY, f64::min);
    if recent.iter().all(|r| r.perplexity >= best_before) {
        let best = best_index(records).expect("records are non-empty");
        StopDecision::Stop {
            best_step: records[best].step,
        }
    } else {
        StopDecision::Continue
    }
}
