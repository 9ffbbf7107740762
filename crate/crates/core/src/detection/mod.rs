//! Per-sample gradient traces, variance-of-gradients and loss scores, the
//! IQR outlier rule, and detection-quality reports.

mod score;
mod trace;

pub use score::{
    iqr_flag, loss_score, score_detection, vog, vog_of_window, DetectionSummary, IqrOutcome, VogScore,
    IQR_MULTIPLIER,
};
pub use trace::{pool_to_cap, GradientStore, GradientTrace, WindowMode, DEFAULT_MAX_DIM};

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Vog,
    Loss,
}

impl Detector {
    pub const ALL: [Detector; 2] = [Detector::Vog, Detector::Loss];

    pub fn as_str(self) -> &'static str {
        match self {
            Detector::Vog => "vog",
            Detector::Loss => "loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub id: String,
    pub score: f64,
    pub flagged: bool,
    pub truly_corrupted: bool,
}

/// JSON side of a detection report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionHeader {
    pub detector: Detector,
    pub epoch: usize,
    pub window_t: usize,
    pub window_mode: WindowMode,
    pub q1: f64,
    pub q3: f64,
    pub threshold: f64,
    /// Stored gradient dimension and the dimension cap in force.
    pub dim: usize,
    pub max_dim: usize,
    pub pool_factor: usize,
    pub flagged: usize,
    pub summary: DetectionSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub header: DetectionHeader,
    pub rows: Vec<DetectionRow>,
}

impl DetectionReport {
    pub fn flagged_ids(&self) -> Vec<String> {
        self.rows.iter().filter(|r| r.flagged).map(|r| r.id.clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,score,flagged,truly_corrupted\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.id, r.score, r.flagged, r.truly_corrupted);
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.header)?)
    }
}

/// Scores every traced sample at `epoch` with `detector`, flags outliers by
/// the IQR rule and compares the flags with `corrupted`.
pub fn detect(
    store: &GradientStore,
    detector: Detector,
    epoch: usize,
    mode: WindowMode,
    corrupted: &BTreeSet<String>,
) -> Result<DetectionReport> {
    let t = store.window_t();
    let scores = store
        .traces()
        .map(|trace| {
            let s = match detector {
                Detector::Vog => vog(trace, epoch, t, mode)?.score,
                Detector::Loss => loss_score(trace, epoch, t)?,
            };
            Ok((trace.id.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = iqr_flag(&scores)?;
    let flagged: BTreeSet<&str> = outcome.flagged.iter().map(String::as_str).collect();
    let rows: Vec<DetectionRow> = scores
        .iter()
        .map(|(id, s)| DetectionRow {
            id: id.clone(),
            score: *s,
            flagged: flagged.contains(id.as_str()),
            truly_corrupted: corrupted.contains(id),
        })
        .collect();
    let all: Vec<&str> = rows.iter().map(|r| r.id.as_str()).collect();
    let truth: Vec<&str> = rows.iter().filter(|r| r.truly_corrupted).map(|r| r.id.as_str()).collect();
    let hits: Vec<&str> = flagged.iter().copied().collect();
    let summary = score_detection(&hits, &truth, &all);
    Ok(DetectionReport {
        header: DetectionHeader {
            detector,
            epoch,
            window_t: t,
            window_mode: mode,
            q1: outcome.q1,
            q3: outcome.q3,
            threshold: outcome.threshold,
            dim: store.dim().unwrap_or(0),
            max_dim: store.max_dim(),
            pool_factor: store.pool_factor(),
            flagged: hits.len(),
            summary,
        },
        rows,
    })
}
