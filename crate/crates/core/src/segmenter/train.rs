use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::unet::{Architecture, ModelParams};
use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::metrics::DiceVector;
use crate::ops;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 30,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub epoch: usize,
    /// Mean validation foreground Dice of `params`.
    pub val_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss seen during the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_dice_per_class: [f64; 3],
}

/// Per-epoch callbacks used by label-quality tooling.
///
/// `on_sample` sees every training sample as it is used in a batch, with its
/// loss and the loss gradient with respect to its logits. When
/// `wants_predictions` holds for an epoch, every training sample's softmax
/// map under the end-of-epoch parameters is passed to `on_prediction`.
/// `on_epoch_end` may rewrite the training labels.
pub trait TrainHooks {
    fn on_sample(
        &mut self,
        _epoch: usize,
        _sample: &LabeledSample,
        _loss: f64,
        _logit_grad: &Tensor<f32>,
    ) -> Result<()> {
        Ok(())
    }

    fn wants_predictions(&self, _epoch: usize) -> bool {
        false
    }

    fn on_prediction(&mut self, _epoch: usize, _sample: &LabeledSample, _probs: Tensor<f32>) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _train: &mut [LabeledSample]) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub final_params: ModelParams<f32>,
    pub trace: Vec<EpochRecord>,
}

pub fn predict_mask(params: &ModelParams<f32>, image: &Tensor<f32>) -> Result<ClassMask> {
    ops::argmax_classes(&params.forward(image)?)
}

pub fn predict_probs(params: &ModelParams<f32>, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    ops::softmax(&params.forward(image)?)
}

struct SampleStep {
    loss: f64,
    logit_grad: Tensor<f32>,
    grads: Vec<Tensor<f32>>,
}

fn sample_step(params: &ModelParams<f32>, sample: &LabeledSample) -> Result<SampleStep> {
    let (logits, tape) = params.forward_recorded(&sample.image)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite(format!("logits of sample {}", sample.id)));
    }
    let (loss, logit_grad) = ops::softmax_cross_entropy(&logits, &sample.mask)
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} of sample {}", sample.id)),
            other => other,
        })?;
    let mut grads = params.zero_grads();
    params.backward_accumulate(&tape, &logit_grad, &mut grads)?;
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("parameter gradient of sample {}", sample.id)));
    }
    Ok(SampleStep {
        loss,
        logit_grad,
        grads,
    })
}

/// Mean loss, mean foreground Dice and per-class Dice against each sample's training mask.
pub fn validate(params: &ModelParams<f32>, samples: &[LabeledSample]) -> Result<(f64, f64, [f64; 3])> {
    let per: Vec<(f64, DiceVector)> = samples
        .par_iter()
        .map(|s| {
            let logits = params.forward(&s.image)?;
            let (loss, _) = ops::softmax_cross_entropy::<f32>(&logits, &s.mask)?;
            let pred = ops::argmax_classes(&logits)?;
            Ok((loss, DiceVector::between(&pred, &s.mask)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let mut classes = [0.0; 3];
    for (_, d) in &per {
        for (c, v) in classes.iter_mut().zip(d.per_class) {
            *c += v / n;
        }
    }
    let dice = per.iter().map(|p| p.1.mean).sum::<f64>() / n;
    Ok((loss, dice, classes))
}

/// Mini-batch Adam training with best-validation-Dice checkpointing.
///
/// Batch order is reshuffled every epoch from the configured seed; the last
/// partial batch is kept. Batch gradients are the mean of per-sample
/// gradients, summed in batch order.
pub fn train(
    train: &mut [LabeledSample],
    val: &[LabeledSample],
    arch: Architecture,
    config: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut params = ModelParams::<f32>::init(arch, config.seed)?;
    let mut adam = AdamState::default();
    let adam_cfg = config.adam();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(config.seed, rng::SHUFFLE, 0);

    let (val_loss, val_dice, per_class) = validate(&params, val)?;
    let mut trace = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss,
        val_dice,
        val_dice_per_class: per_class,
    }];
    let mut best = Checkpoint {
        params: params.clone(),
        epoch: 0,
        val_dice,
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let steps: Vec<SampleStep> = batch
                .par_iter()
                .map(|&i| sample_step(&params, &train[i]))
                .collect::<Result<_>>()?;
            let mut grads = params.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for (&i, step) in batch.iter().zip(&steps) {
                loss_sum += step.loss;
                hooks.on_sample(epoch, &train[i], step.loss, &step.logit_grad)?;
                for (acc, g) in grads.iter_mut().zip(&step.grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *v;
                    }
                }
            }
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            adam.update(params.tensors_mut(), &grads, &adam_cfg)?;
        }

        let (val_loss, val_dice, per_class) = validate(&params, val)?;
        trace.push(EpochRecord {
            epoch,
            train_loss: Some(loss_sum / train.len() as f64),
            val_loss,
            val_dice,
            val_dice_per_class: per_class,
        });
        if val_dice > best.val_dice {
            best = Checkpoint {
                params: params.clone(),
                epoch,
                val_dice,
            };
        }

        if hooks.wants_predictions(epoch) {
            let probs: Vec<Tensor<f32>> = train
                .par_iter()
                .map(|s| predict_probs(&params, &s.image))
                .collect::<Result<_>>()?;
            for (s, p) in train.iter().zip(probs) {
                hooks.on_prediction(epoch, s, p)?;
            }
        }
        hooks.on_epoch_end(epoch, train)?;
    }

    Ok(TrainOutcome {
        best,
        final_params: params,
        trace,
    })
}
