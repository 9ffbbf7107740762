//! Segmentation metrics, distribution summaries and the paired significance test.

mod dice;
mod wilcoxon;

pub use dice::{dice, foreground_dice, DiceVector};
pub use wilcoxon::{
    normal_approximation_p, wilcoxon_signed_rank, PValueMethod, PairedTestResult, ALPHA,
    EXACT_LIMIT, MIN_EFFECTIVE,
};

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::segmenter::{predict_mask, ModelParams};

/// Quantile of ascending `sorted` values by linear interpolation at zero-based
/// position `p · (n − 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (divisor `n − 1`; zero for a single value).
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Summary {
            n,
            mean,
            std,
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub id: String,
    pub dice: DiceVector,
}

/// Per-structure summaries (LV, LVM, LA) and the foreground mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub lv: Summary,
    pub lvm: Summary,
    pub la: Summary,
    pub mean: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: Vec<SampleDice>,
    pub summary: EvaluationSummary,
}

impl Evaluation {
    pub fn from_samples(samples: Vec<SampleDice>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("cannot evaluate an empty split".into()));
        }
        let column = |i: usize| -> Summary {
            let v: Vec<f64> = samples.iter().map(|s| s.dice.columns()[i]).collect();
            Summary::of(&v).expect("non-empty")
        };
        let summary = EvaluationSummary {
            lv: column(0),
            lvm: column(1),
            la: column(2),
            mean: column(3),
        };
        Ok(Evaluation { samples, summary })
    }

    /// One column of per-sample values: 0 = LV, 1 = LVM, 2 = LA, 3 = mean.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.dice.columns()[i]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,lv,lvm,la,mean\n");
        for s in &self.samples {
            let [a, b, c, m] = s.dice.columns();
            out.push_str(&format!("{},{a:.6},{b:.6},{c:.6},{m:.6}\n", s.id));
        }
        out
    }
}

/// Dice of the model's predictions against each sample's clean reference mask.
pub fn evaluate_model(params: &ModelParams<f32>, samples: &[LabeledSample]) -> Result<Evaluation> {
    let per_sample = samples
        .iter()
        .map(|s| {
            let pred = predict_mask(params, &s.image)?;
            Ok(SampleDice {
                id: s.id.clone(),
                dice: DiceVector::between(&pred, &s.clean_mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_samples(per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_linearly() {
        let v: Vec<f64> = (1..=9).map(f64::from).chain([100.0]).collect();
        assert_eq!(quantile_sorted(&v, 0.25), 3.25);
        assert_eq!(quantile_sorted(&v, 0.75), 7.75);
        assert_eq!(quantile_sorted(&[4.0], 0.5), 4.0);
    }

    #[test]
    fn summary_of_constant() {
        let s = Summary::of(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.std, s.q1, s.q3), (2.0, 0.0, 2.0, 2.0));
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn empty_evaluation_is_rejected() {
        assert!(Evaluation::from_samples(vec![]).is_err());
    }
}
