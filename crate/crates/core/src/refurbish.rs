//! Prediction histories, averaged-prediction pseudo-labels and the label
//! refurbishment step.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::detection::pool_to_cap;
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::metrics::foreground_dice;
use crate::ops;
use crate::pipeline::Schedule;
use crate::tensor::Tensor;

/// Number of consecutive epochs averaged into a pseudo-label.
pub const PSEUDO_LABEL_EPOCHS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHistory {
    pub id: String,
    /// Spatial size of the unpooled maps.
    pub height: usize,
    pub width: usize,
    pool_factor: usize,
    epochs: VecDeque<usize>,
    maps: VecDeque<Tensor<f32>>,
}

impl PredictionHistory {
    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.epochs.iter().copied()
    }

    pub fn pool_factor(&self) -> usize {
        self.pool_factor
    }

    fn push(&mut self, epoch: usize, map: Tensor<f32>) -> Result<()> {
        if let Some(&last) = self.epochs.back() {
            if epoch <= last {
                return Err(Error::Data(format!(
                    "{}: prediction for epoch {epoch} recorded after epoch {last}",
                    self.id
                )));
            }
        }
        self.epochs.push_back(epoch);
        self.maps.push_back(map);
        while self.epochs.len() > PSEUDO_LABEL_EPOCHS {
            self.epochs.pop_front();
            self.maps.pop_front();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    /// Mean of the buffered probability maps (possibly pooled).
    pub soft: Tensor<f32>,
    /// Per-pixel argmax at full resolution, ties to the lowest class.
    pub hard: ClassMask,
}

/// Mean of the probability maps of epochs `epoch − 4 ..= epoch`.
pub fn pseudo_label(history: &PredictionHistory, epoch: usize) -> Result<PseudoLabel> {
    let wanted: Vec<usize> = (0..PSEUDO_LABEL_EPOCHS)
        .map(|k| (epoch + k + 1).checked_sub(PSEUDO_LABEL_EPOCHS))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::InsufficientWindow(format!("epoch {epoch} is too early for a pseudo-label")))?;
    if history.epochs.iter().copied().ne(wanted.iter().copied()) {
        return Err(Error::InsufficientWindow(format!(
            "{}: pseudo-label at epoch {epoch} needs epochs {wanted:?}, have {:?}",
            history.id, history.epochs
        )));
    }
    let shape = history.maps[0].shape().to_vec();
    let mut sum = vec![0.0f64; history.maps[0].len()];
    for m in &history.maps {
        for (s, &v) in sum.iter_mut().zip(m.data()) {
            *s += v as f64;
        }
    }
    let n = PSEUDO_LABEL_EPOCHS as f64;
    let soft = Tensor::from_vec(&shape, sum.iter().map(|s| (s / n) as f32).collect())?;
    let mut full = ops::argmax_classes(&soft)?;
    let f = history.pool_factor;
    if f > 1 {
        let coarse = full;
        full = ClassMask::new(history.height, history.width);
        for y in 0..history.height {
            for x in 0..history.width {
                full.set(y, x, coarse.get(y / f, x / f));
            }
        }
    }
    Ok(PseudoLabel { soft, hard: full })
}

/// Probability-map histories of the training samples.
#[derive(Clone, Debug)]
pub struct PredictionStore {
    max_dim: usize,
    histories: BTreeMap<String, PredictionHistory>,
}

impl PredictionStore {
    pub fn new(max_dim: usize) -> Self {
        PredictionStore {
            max_dim,
            histories: BTreeMap::new(),
        }
    }

    pub fn history(&self, id: &str) -> Option<&PredictionHistory> {
        self.histories.get(id)
    }

    /// Stores the softmax map of `id` at `epoch`, pooled when it exceeds the cap.
    pub fn record(&mut self, id: &str, epoch: usize, probs: &Tensor<f32>) -> Result<()> {
        let (c, h, w) = probs.dims3()?;
        let (data, factor) = pool_to_cap(probs, self.max_dim)?;
        let map = Tensor::from_vec(&[c, h / factor, w / factor], data)?;
        let history = self.histories.entry(id.to_string()).or_insert_with(|| PredictionHistory {
            id: id.to_string(),
            height: h,
            width: w,
            pool_factor: factor,
            epochs: VecDeque::new(),
            maps: VecDeque::new(),
        });
        if (history.height, history.width, history.pool_factor) != (h, w, factor) {
            return Err(Error::Shape(format!("{id}: prediction size changed between epochs")));
        }
        history.push(epoch, map)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefurbishedSample {
    pub id: String,
    pub truly_corrupted: bool,
    /// Foreground Dice of the replaced and the new label against the clean mask.
    pub dice_before: f64,
    pub dice_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefurbishmentEvent {
    pub epoch: usize,
    pub flagged: Vec<String>,
    pub samples: Vec<RefurbishedSample>,
}

impl RefurbishmentEvent {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Renders events as JSON lines.
pub fn events_to_jsonl(events: &[RefurbishmentEvent]) -> Result<String> {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(out, "{}", e.to_json_line()?);
    }
    Ok(out)
}

/// Replaces each flagged training label by its hard pseudo-label at `epoch`.
/// Either every flagged sample is updated or none is.
pub fn refurbish_step(
    train: &mut [LabeledSample],
    flagged: &[String],
    histories: &PredictionStore,
    epoch: usize,
    schedule: &Schedule,
) -> Result<RefurbishmentEvent> {
    if !schedule.is_event(epoch) {
        return Err(Error::Config(format!(
            "epoch {epoch} is not a refurbishment epoch (warm-up {}, interval {})",
            schedule.warm_up, schedule.interval
        )));
    }
    let index: BTreeMap<&str, usize> = train.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut updates = Vec::with_capacity(flagged.len());
    for id in flagged {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| Error::Data(format!("flagged sample {id} is not in the training split")))?;
        let history = histories
            .history(id)
            .ok_or_else(|| Error::InsufficientWindow(format!("{id}: no prediction history")))?;
        let label = pseudo_label(history, epoch)?;
        if label.hard.dims() != train[i].dims() {
            return Err(Error::Shape(format!("{id}: pseudo-label size differs from the mask")));
        }
        updates.push((i, label.hard));
    }
    let mut samples = Vec::with_capacity(updates.len());
    for (i, hard) in updates {
        let s = &mut train[i];
        let dice_before = foreground_dice(&s.mask, &s.clean_mask)?;
        let dice_after = foreground_dice(&hard, &s.clean_mask)?;
        s.mask = hard;
        samples.push(RefurbishedSample {
            id: s.id.clone(),
            truly_corrupted: s.corrupted,
            dice_before,
            dice_after,
        });
    }
    Ok(RefurbishmentEvent {
        epoch,
        flagged: flagged.to_vec(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_pixel(p0: f32) -> Tensor<f32> {
        Tensor::from_vec(&[2, 1, 1], vec![p0, 1.0 - p0]).unwrap()
    }

    fn store_with(maps: &[(usize, Tensor<f32>)]) -> PredictionStore {
        let mut store = PredictionStore::new(usize::MAX);
        for (e, m) in maps {
            store.record("a", *e, m).unwrap();
        }
        store
    }

    #[test]
    fn three_to_two_vote() {
        let maps: Vec<_> = [1.0, 1.0, 1.0, 0.0, 0.0]
            .into_iter()
            .enumerate()
            .map(|(k, p)| (k + 6, one_pixel(p)))
            .collect();
        let label = pseudo_label(store_with(&maps).history("a").unwrap(), 10).unwrap();
        assert!((label.soft.data()[0] - 0.6).abs() < 1e-6 && (label.soft.data()[1] - 0.4).abs() < 1e-6);
        assert_eq!(label.hard.get(0, 0), 0);
    }

    #[test]
    fn ties_go_to_the_lowest_class() {
        let maps: Vec<_> = (1..=5).map(|e| (e, one_pixel(0.5))).collect();
        let label = pseudo_label(store_with(&maps).history("a").unwrap(), 5).unwrap();
        assert_eq!(label.hard.get(0, 0), 0);
    }

    #[test]
    fn incomplete_history_is_rejected() {
        let maps: Vec<_> = (1..=4).map(|e| (e, one_pixel(0.2))).collect();
        let store = store_with(&maps);
        assert!(matches!(
            pseudo_label(store.history("a").unwrap(), 4),
            Err(Error::InsufficientWindow(_))
        ));
        let maps: Vec<_> = [1, 2, 3, 4, 6].into_iter().map(|e| (e, one_pixel(0.2))).collect();
        assert!(pseudo_label(store_with(&maps).history("a").unwrap(), 6).is_err());
    }

    #[test]
    fn pooled_histories_are_upsampled() {
        let mut store = PredictionStore::new(2 * 2 * 2);
        let mut probs = Tensor::zeros(&[2, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let p = if x < 2 { 0.9 } else { 0.1 };
                probs.data_mut()[y * 4 + x] = p;
                probs.data_mut()[16 + y * 4 + x] = 1.0 - p;
            }
        }
        for e in 1..=5 {
            store.record("a", e, &probs).unwrap();
        }
        let h = store.history("a").unwrap();
        assert_eq!(h.pool_factor(), 2);
        let label = pseudo_label(h, 5).unwrap();
        assert_eq!(label.soft.shape(), &[2, 2, 2]);
        assert_eq!(label.hard.dims(), (4, 4));
        assert_eq!(label.hard.get(3, 1), 0);
        assert_eq!(label.hard.get(0, 3), 1);
    }
}
