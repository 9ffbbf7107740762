//! Labelled samples, train/validation/test splits, and on-disk datasets.

pub mod pgm;
pub mod phantom;
mod store;

pub use phantom::{generate_phantom, phantom_geometry, PhantomGeometry, PhantomParams};
pub use store::{dataset_digest, read_dataset, read_sample, write_dataset, write_sample, ManifestRecord, SamplePaths};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionKind;
use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    /// `(1, H, W)` intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Training label; may be corrupted or refurbished.
    pub mask: ClassMask,
    /// Pristine reference label.
    pub clean_mask: ClassMask,
    pub corrupted: bool,
    pub corruption_kind: Option<CorruptionKind>,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: ClassMask) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 1 || mask.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} disagree",
                image.shape(),
                mask.dims()
            )));
        }
        Ok(LabeledSample {
            id: id.into(),
            image,
            clean_mask: mask.clone(),
            mask,
            corrupted: false,
            corruption_kind: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Split assignment for every sample id, plus the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: Option<PhantomParams>,
    pub split_seed: u64,
    pub fractions: [f64; 3],
    /// `(id, split)` in sample order.
    pub assignments: Vec<(String, Split)>,
}

impl DatasetManifest {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.assignments
            .iter()
            .find(|(i, _)| i == id)
            .map(|(_, s)| *s)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(i, _)| i.clone())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for (_, s) in &self.assignments {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn lookup(&self) -> BTreeMap<&str, Split> {
        self.assignments
            .iter()
            .map(|(i, s)| (i.as_str(), *s))
            .collect()
    }

    /// Clones out the samples assigned to `split`, in sample order.
    pub fn select(&self, samples: &[LabeledSample], split: Split) -> Vec<LabeledSample> {
        let lookup = self.lookup();
        samples
            .iter()
            .filter(|s| lookup.get(s.id.as_str()) == Some(&split))
            .cloned()
            .collect()
    }
}

/// Seeded shuffle followed by a contiguous train/val/test cut. Validation and
/// test counts are floored; the remainder goes to training.
pub fn split_dataset(samples: &[LabeledSample], fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = samples.len();
    let n_val = (n as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * fractions[2] + 1e-9).floor() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} samples by {fractions:?} leaves an empty split ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT, 0));
    let mut split = vec![Split::Train; n];
    for &i in &order[n_train..n_train + n_val] {
        split[i] = Split::Val;
    }
    for &i in &order[n_train + n_val..] {
        split[i] = Split::Test;
    }
    Ok(DatasetManifest {
        generator: None,
        split_seed: seed,
        fractions,
        assignments: samples
            .iter()
            .zip(split)
            .map(|(s, sp)| (s.id.clone(), sp))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| {
                LabeledSample::new(format!("s{i}"), Tensor::zeros(&[1, 2, 2]), ClassMask::new(2, 2))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn five_hundred_sample_split() {
        let m = split_dataset(&dummy(500), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(m.counts(), [400, 50, 50]);
    }

    #[test]
    fn ten_sample_split_and_determinism() {
        let s = dummy(10);
        let a = split_dataset(&s, [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(a.counts(), [8, 1, 1]);
        assert_eq!(a, split_dataset(&s, [0.8, 0.1, 0.1], 5).unwrap());
        assert_ne!(a, split_dataset(&s, [0.8, 0.1, 0.1], 6).unwrap());
    }

    #[test]
    fn split_is_a_partition() {
        let s = dummy(37);
        let m = split_dataset(&s, [0.7, 0.2, 0.1], 3).unwrap();
        let mut all: Vec<String> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&sp| m.ids(sp))
            .collect();
        all.sort();
        let mut expected: Vec<String> = s.iter().map(|x| x.id.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn empty_splits_are_rejected() {
        assert!(split_dataset(&dummy(5), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_dataset(&dummy(50), [0.8, 0.3, 0.1], 0).is_err());
    }

    #[test]
    fn mismatched_image_and_mask_are_rejected() {
        assert!(LabeledSample::new("x", Tensor::zeros(&[1, 2, 3]), ClassMask::new(2, 2)).is_err());
    }
}
