use serde::{Deserialize, Serialize};

use super::trace::{GradientTrace, WindowMode};
use crate::error::{Error, Result};
use crate::metrics::quantile_sorted;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VogScore {
    pub id: String,
    pub epoch: usize,
    pub score: f64,
    /// Per-dimension window mean.
    #[serde(skip)]
    pub mean: Vec<f64>,
}

/// Mean over dimensions of the per-dimension gradient standard deviation
/// across the window ending at `epoch` (divisor `t`).
pub fn vog_of_window(window: &[&[f32]], t: usize) -> Result<(f64, Vec<f64>)> {
    let dim = window.first().map_or(0, |g| g.len());
    if window.is_empty() || dim == 0 || t == 0 {
        return Err(Error::InsufficientWindow("empty gradient window".into()));
    }
    if window.iter().any(|g| g.len() != dim) {
        return Err(Error::Shape("gradient window mixes dimensions".into()));
    }
    let mut mean = vec![0.0f64; dim];
    let mut m2 = vec![0.0f64; dim];
    for (k, g) in window.iter().enumerate() {
        let n = (k + 1) as f64;
        for ((m, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(g.iter()) {
            let v = v as f64;
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }
    let score = m2.iter().map(|s| (s.max(0.0) / t as f64).sqrt()).sum::<f64>() / dim as f64;
    if !score.is_finite() {
        return Err(Error::NonFinite("VOG score".into()));
    }
    Ok((score, mean))
}

pub fn vog(trace: &GradientTrace, epoch: usize, t: usize, mode: WindowMode) -> Result<VogScore> {
    let window = trace.window(epoch, mode.terms(t))?;
    let (score, mean) = vog_of_window(&window, t)?;
    Ok(VogScore {
        id: trace.id.clone(),
        epoch,
        score,
        mean,
    })
}

/// Mean training loss over the `t` epochs ending at `epoch`.
pub fn loss_score(trace: &GradientTrace, epoch: usize, t: usize) -> Result<f64> {
    let w = trace.loss_window(epoch, t)?;
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

pub const IQR_MULTIPLIER: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqrOutcome {
    pub flagged: Vec<String>,
    pub q1: f64,
    pub q3: f64,
    pub threshold: f64,
}

/// Flags ids whose score is strictly above `Q3 + 1.5 · (Q3 − Q1)`.
pub fn iqr_flag(scores: &[(String, f64)]) -> Result<IqrOutcome> {
    if scores.len() < 4 {
        return Err(Error::Data(format!(
            "the IQR rule needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    if let Some((id, _)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of {id}")));
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.1).collect();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let threshold = q3 + IQR_MULTIPLIER * (q3 - q1);
    let flagged = scores
        .iter()
        .filter(|(_, s)| *s > threshold)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(IqrOutcome {
        flagged,
        q1,
        q3,
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub accuracy: f64,
    /// 1 when nothing is corrupted.
    pub sensitivity: f64,
    /// 1 when everything is corrupted.
    pub specificity: f64,
}

pub fn score_detection<S: AsRef<str>>(flagged: &[S], corrupted: &[S], all: &[S]) -> DetectionSummary {
    let has = |set: &[S], id: &str| set.iter().any(|s| s.as_ref() == id);
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for id in all {
        let id = id.as_ref();
        match (has(flagged, id), has(corrupted, id)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize, empty: f64| if b == 0 { empty } else { a as f64 / b as f64 };
    DetectionSummary {
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
        accuracy: ratio(tp + tn, all.len(), 1.0),
        sensitivity: ratio(tp, tp + fn_, 1.0),
        specificity: ratio(tn, tn + fp, 1.0),
    }
}
