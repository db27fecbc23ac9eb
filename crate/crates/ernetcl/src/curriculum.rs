//! Curriculum learning: per-conversation difficulty from speaker-specific
//! emotion-shift frequency, an epoch-dependent weight schedule, and the
//! weighted training loss.
//!
//! A conversation is harder the more often its speakers change emotion
//! between their own consecutive utterances. Early epochs downweight hard
//! conversations; the weights rise toward parity as training progresses.

use std::collections::BTreeMap;

use crate::data::{Batch, Conversation};
use crate::error::{Error, Result};
use crate::tensor::stable_sigmoid;

/// Per-conversation difficulty in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DifficultyScore(f64);

impl DifficultyScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Weight schedule: `sigma` controls how fast weights grow, `delta >= 1`
/// shrinks the epoch ratio, `max_epochs` is the training horizon.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumSchedule {
    pub sigma: f64,
    pub delta: f64,
    pub max_epochs: usize,
}

impl CurriculumSchedule {
    pub fn new(sigma: f64, delta: f64, max_epochs: usize) -> Result<Self> {
        let s = CurriculumSchedule {
            sigma,
            delta,
            max_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if self.delta.is_nan() || self.delta < 1.0 {
            return Err(Error::Config(format!("delta {} must be >= 1", self.delta)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// For each speaker, the number of emotion shifts in their chronological
/// subsequence and their total utterance count.
pub fn speaker_shift_counts(conv: &Conversation) -> BTreeMap<String, (usize, usize)> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    for utt in &conv.utterances {
        let entry = counts.entry(utt.speaker.clone()).or_insert((0, 0));
        entry.1 += 1;
        if let Some(&prev) = last.get(utt.speaker.as_str()) {
            if prev != utt.label {
                entry.0 += 1;
            }
        }
        last.insert(utt.speaker.as_str(), utt.label);
    }
    counts
}

/// Mean over speakers of shifts/utterances.
pub fn difficulty(conv: &Conversation) -> Result<f64> {
    if conv.utterances.is_empty() {
        return Err(Error::Empty(format!("conversation {} has no utterances", conv.id)));
    }
    let counts = speaker_shift_counts(conv);
    let sum: f64 = counts
        .values()
        .map(|&(shifts, utts)| shifts as f64 / utts as f64)
        .sum();
    Ok(sum / counts.len() as f64)
}

pub fn difficulty_score(conv: &Conversation) -> Result<DifficultyScore> {
    Ok(DifficultyScore(difficulty(conv)?))
}

/// `R(t) = t / (delta * T)` for 1-indexed epochs.
pub fn epoch_ratio(t: usize, sched: &CurriculumSchedule) -> Result<f64> {
    sched.validate()?;
    if t == 0 || t > sched.max_epochs {
        return Err(Error::Range(format!(
            "epoch {t} outside 1..={}",
            sched.max_epochs
        )));
    }
    Ok(t as f64 / (sched.delta * sched.max_epochs as f64))
}

/// `omega = sigmoid((R(t) - D) / sigma)`.
pub fn weight(t: usize, difficulty: f64, sched: &CurriculumSchedule) -> Result<f64> {
    let r = epoch_ratio(t, sched)?;
    Ok(stable_sigmoid((r - difficulty) / sched.sigma))
}

/// Curriculum loss over one padded batch: every utterance of conversation
/// `i` is scaled by `weights[i]`, and the normalizer stays the raw count of
/// valid utterances.
pub fn cl_loss(probs: &[f64], batch: &Batch, weights: &[f64]) -> Result<f64> {
    if weights.len() != batch.size {
        return Err(Error::ShapeMismatch {
            op: "cl_loss weights",
            lhs: vec![batch.size],
            rhs: vec![weights.len()],
        });
    }
    for &w in weights {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Range(format!("conversation weight {w} outside [0, 1]")));
        }
    }
    let k = batch.num_classes;
    if probs.len() != batch.size * batch.max_len * k {
        return Err(Error::ShapeMismatch {
            op: "cl_loss probs",
            lhs: vec![batch.size, batch.max_len, k],
            rhs: vec![probs.len()],
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for b in 0..batch.size {
        for j in 0..batch.lengths[b] {
            let slot = b * batch.max_len + j;
            let label = batch.labels[slot];
            if label < 0 || label as usize >= k {
                return Err(Error::Label(format!(
                    "label {label} outside [0, {k}) in conversation {}",
                    batch.conv_ids[b]
                )));
            }
            let p = probs[slot * k + label as usize];
            total += weights[b] * p.max(1e-12).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("batch has no valid utterances".into()));
    }
    Ok(-total / n as f64)
}
