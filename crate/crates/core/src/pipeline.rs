//! Iterative detection and refurbishment wired into the training loop.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::detection::{detect, DetectionReport, Detector, GradientStore, WindowMode, DEFAULT_MAX_DIM};
use crate::error::{Error, Result};
use crate::refurbish::{refurbish_step, PredictionStore, RefurbishmentEvent, PSEUDO_LABEL_EPOCHS};
use crate::segmenter::{train, Architecture, TrainConfig, TrainHooks, TrainOutcome};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// Epochs trained before the first detection.
    pub warm_up: usize,
    /// Epochs between detection events.
    pub interval: usize,
    /// Gradient and loss window length.
    pub window_t: usize,
    pub window_mode: WindowMode,
    /// Cap on stored gradient and prediction dimensions per sample.
    pub max_dim: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warm_up: 10,
            interval: 5,
            window_t: 5,
            window_mode: WindowMode::Inclusive,
            max_dim: DEFAULT_MAX_DIM,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.window_t == 0 || self.max_dim == 0 {
            return Err(Error::Config("interval, window_t and max_dim must be >= 1".into()));
        }
        if self.warm_up < self.window_t {
            return Err(Error::Config(format!(
                "warm-up ({}) must be at least the window length ({})",
                self.warm_up, self.window_t
            )));
        }
        let first = self.first_event();
        let needed = self.window_mode.terms(self.window_t).max(PSEUDO_LABEL_EPOCHS);
        if first < needed {
            return Err(Error::Config(format!(
                "the first event (epoch {first}) comes before {needed} epochs of history exist"
            )));
        }
        Ok(())
    }

    pub fn is_event(&self, epoch: usize) -> bool {
        epoch > self.warm_up && epoch % self.interval == 0
    }

    pub fn first_event(&self) -> usize {
        (self.warm_up / self.interval + 1) * self.interval
    }

    pub fn events(&self, epochs: usize) -> Vec<usize> {
        (1..=epochs).filter(|&e| self.is_event(e)).collect()
    }

    /// Whether prediction maps of `epoch` feed a pseudo-label within `epochs`.
    pub fn needs_snapshot(&self, epoch: usize, epochs: usize) -> bool {
        (epoch..epoch + PSEUDO_LABEL_EPOCHS).any(|e| e <= epochs && self.is_event(e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    #[default]
    Baseline,
    #[serde(alias = "refurb")]
    Refurbished,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Refurbished => "refurbished",
        }
    }
}

/// Training hooks that score every training sample with both detectors at
/// each event epoch and, in the refurbished pipeline, relabel the samples
/// flagged by the chosen detector.
pub struct LabelQualityHooks {
    schedule: Schedule,
    pipeline: Pipeline,
    detector: Detector,
    epochs: usize,
    corrupted: BTreeSet<String>,
    gradients: GradientStore,
    predictions: PredictionStore,
    pub detections: Vec<DetectionReport>,
    pub events: Vec<RefurbishmentEvent>,
}

impl LabelQualityHooks {
    pub fn new(
        schedule: Schedule,
        pipeline: Pipeline,
        detector: Detector,
        epochs: usize,
        train: &[LabeledSample],
    ) -> Result<Self> {
        schedule.validate()?;
        Ok(LabelQualityHooks {
            schedule,
            pipeline,
            detector,
            epochs,
            corrupted: train.iter().filter(|s| s.corrupted).map(|s| s.id.clone()).collect(),
            gradients: GradientStore::new(schedule.window_t, schedule.max_dim)?,
            predictions: PredictionStore::new(schedule.max_dim),
            detections: Vec::new(),
            events: Vec::new(),
        })
    }

    fn records(&self, epoch: usize) -> bool {
        let lead = self.schedule.window_mode.terms(self.schedule.window_t);
        (epoch..epoch + lead).any(|e| e <= self.epochs && self.schedule.is_event(e))
    }
}

impl TrainHooks for LabelQualityHooks {
    fn on_sample(&mut self, epoch: usize, sample: &LabeledSample, loss: f64, logit_grad: &Tensor<f32>) -> Result<()> {
        if self.records(epoch) {
            self.gradients.record_epoch(&sample.id, epoch, logit_grad, loss)?;
        }
        Ok(())
    }

    fn wants_predictions(&self, epoch: usize) -> bool {
        self.pipeline == Pipeline::Refurbished && self.schedule.needs_snapshot(epoch, self.epochs)
    }

    fn on_prediction(&mut self, epoch: usize, sample: &LabeledSample, probs: Tensor<f32>) -> Result<()> {
        self.predictions.record(&sample.id, epoch, &probs)
    }

    fn on_epoch_end(&mut self, epoch: usize, train: &mut [LabeledSample]) -> Result<()> {
        if !self.schedule.is_event(epoch) {
            return Ok(());
        }
        for detector in Detector::ALL {
            let report = detect(&self.gradients, detector, epoch, self.schedule.window_mode, &self.corrupted)?;
            self.detections.push(report);
        }
        if self.pipeline == Pipeline::Refurbished {
            let flagged = self
                .detections
                .iter()
                .rev()
                .find(|r| r.header.detector == self.detector)
                .map(DetectionReport::flagged_ids)
                .unwrap_or_default();
            let event = refurbish_step(train, &flagged, &self.predictions, epoch, &self.schedule)?;
            self.events.push(event);
        }
        Ok(())
    }
}

pub struct PipelineOutcome {
    pub training: TrainOutcome,
    pub detections: Vec<DetectionReport>,
    pub events: Vec<RefurbishmentEvent>,
}

/// Trains with detection at every event epoch and, for the refurbished
/// pipeline, label refurbishment. `train_set` ends up holding the final labels.
pub fn run_pipeline(
    train_set: &mut [LabeledSample],
    val_set: &[LabeledSample],
    arch: Architecture,
    config: &TrainConfig,
    schedule: Schedule,
    pipeline: Pipeline,
    detector: Detector,
) -> Result<PipelineOutcome> {
    let mut hooks = LabelQualityHooks::new(schedule, pipeline, detector, config.epochs, train_set)?;
    let training = train(train_set, val_set, arch, config, &mut hooks)?;
    Ok(PipelineOutcome {
        training,
        detections: hooks.detections,
        events: hooks.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_events() {
        let s = Schedule::default();
        s.validate().unwrap();
        assert_eq!(s.events(30), vec![15, 20, 25, 30]);
        assert_eq!(s.first_event(), 15);
        assert!(!s.needs_snapshot(10, 30));
        assert!((11..=30).all(|e| s.needs_snapshot(e, 30)));
        assert!(!s.needs_snapshot(11, 14));
    }

    #[test]
    fn schedule_rejects_short_warm_up() {
        let s = Schedule {
            warm_up: 3,
            ..Schedule::default()
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = Schedule {
            warm_up: 5,
            interval: 1,
            window_t: 5,
            window_mode: WindowMode::Literal,
            ..Schedule::default()
        };
        assert!(s.validate().is_ok());
        assert_eq!(s.first_event(), 6);
    }
}
