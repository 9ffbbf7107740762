//! Synthetic ground-truth label errors: incomplete labels, boundary
//! distortion and merged labels, injected either at random or systematically
//! into a seeded subset of the training and validation samples.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, LabeledSample, Split};
use crate::error::{Error, Result};
use crate::mask::{ClassMask, BACKGROUND, FOREGROUND, LV, LVM};
use crate::morphology::{dilate, erode, StructuringElement};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Incomplete,
    Boundary,
    Merged,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::Incomplete,
        CorruptionKind::Boundary,
        CorruptionKind::Merged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Incomplete => "incomplete",
            CorruptionKind::Boundary => "boundary",
            CorruptionKind::Merged => "merged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    Random,
    Systematic,
}

impl CorruptionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionMode::Random => "random",
            CorruptionMode::Systematic => "systematic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryOp {
    Dilate,
    Erode,
}

/// Magnitudes of the edits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionParams {
    /// Random-mode removal fraction range for incomplete labels.
    pub removal_fraction: (f64, f64),
    pub systematic_removal_fraction: f64,
    /// Random-mode morphology radii, drawn uniformly.
    pub radii: Vec<usize>,
    pub systematic_radius: usize,
}

impl Default for CorruptionParams {
    fn default() -> Self {
        CorruptionParams {
            removal_fraction: (0.2, 0.5),
            systematic_removal_fraction: 0.35,
            radii: vec![1, 2, 3],
            systematic_radius: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub mode: CorruptionMode,
    pub proportion: f64,
    pub seed: u64,
    #[serde(default)]
    pub params: CorruptionParams,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, mode: CorruptionMode, proportion: f64, seed: u64) -> Self {
        CorruptionSpec {
            kind,
            mode,
            proportion,
            seed,
            params: CorruptionParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::Config(format!(
                "corruption proportion {} is outside [0, 1]",
                self.proportion
            )));
        }
        let (lo, hi) = p.removal_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0)
            || !(0.0 < p.systematic_removal_fraction && p.systematic_removal_fraction < 1.0)
        {
            return Err(Error::Config("removal fractions must lie in (0, 1)".into()));
        }
        if p.radii.is_empty() || p.radii.contains(&0) || p.systematic_radius == 0 {
            return Err(Error::Config("morphology radii must be >= 1".into()));
        }
        Ok(())
    }
}

/// A concrete, fully parameterized edit of one mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "snake_case")]
pub enum Edit {
    Incomplete { class: u8, fraction: f64, angle: f64 },
    Boundary { classes: Vec<u8>, op: BoundaryOp, radius: usize },
    Merge { source: u8, target: u8 },
}

fn require_present(mask: &ClassMask, class: u8) -> Result<()> {
    if mask.contains(class) {
        Ok(())
    } else {
        Err(Error::Data(format!("class {class} is absent from the mask")))
    }
}

/// Relabels to background the `round(fraction · |class|)` class pixels that
/// lie furthest on the `−(cos angle, sin angle)` side, i.e. a half-plane cut
/// swept along that direction (x to the right, y downwards).
pub fn incomplete_label_at_angle(mask: &ClassMask, class: u8, fraction: f64, angle: f64) -> Result<ClassMask> {
    require_present(mask, class)?;
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("removal fraction {fraction} outside [0, 1)")));
    }
    let w = mask.width();
    let (s, c) = angle.sin_cos();
    let mut pixels: Vec<(f64, usize)> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == class)
        .map(|(i, _)| ((i % w) as f64 * c + (i / w) as f64 * s, i))
        .collect();
    let remove = (fraction * pixels.len() as f64).round() as usize;
    pixels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = mask.clone();
    for &(_, i) in &pixels[..remove] {
        out.data_mut()[i] = BACKGROUND;
    }
    Ok(out)
}

/// Half-plane removal at a cut angle drawn from `seed`.
pub fn incomplete_label(mask: &ClassMask, class: u8, fraction: f64, seed: u64) -> Result<ClassMask> {
    let mut rng = rng::stream(seed, rng::CORRUPT_EDIT, u64::MAX);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    incomplete_label_at_angle(mask, class, fraction, angle)
}

pub fn boundary_distortion(mask: &ClassMask, class: u8, op: BoundaryOp, radius: usize) -> Result<ClassMask> {
    require_present(mask, class)?;
    let se = StructuringElement::disk(radius)?;
    let (h, w) = mask.dims();
    let region = mask.indicator(class);
    let mut out = mask.clone();
    match op {
        BoundaryOp::Dilate => {
            for (px, grown) in out.data_mut().iter_mut().zip(dilate(&region, h, w, &se)) {
                if grown {
                    *px = class;
                }
            }
        }
        BoundaryOp::Erode => {
            let kept = erode(&region, h, w, &se);
            for ((px, was), keep) in out.data_mut().iter_mut().zip(region).zip(kept) {
                if was && !keep {
                    *px = BACKGROUND;
                }
            }
        }
    }
    Ok(out)
}

pub fn merged_labels(mask: &ClassMask, source: u8, target: u8) -> Result<ClassMask> {
    if source == target {
        return Err(Error::Config(format!("cannot merge class {source} into itself")));
    }
    require_present(mask, source)?;
    let mut out = mask.clone();
    for px in out.data_mut() {
        if *px == source {
            *px = target;
        }
    }
    Ok(out)
}

pub fn apply_edit(mask: &ClassMask, edit: &Edit) -> Result<ClassMask> {
    match edit {
        Edit::Incomplete {
            class,
            fraction,
            angle,
        } => incomplete_label_at_angle(mask, *class, *fraction, *angle),
        Edit::Boundary { classes, op, radius } => classes
            .iter()
            .try_fold(mask.clone(), |m, &c| boundary_distortion(&m, c, *op, *radius)),
        Edit::Merge { source, target } => merged_labels(mask, *source, *target),
    }
}

fn present_foreground(mask: &ClassMask) -> Vec<u8> {
    FOREGROUND.iter().copied().filter(|&c| mask.contains(c)).collect()
}

/// The fixed edit applied to every affected sample in systematic mode.
pub fn systematic_policy(kind: CorruptionKind, params: &CorruptionParams, angle: f64) -> Edit {
    match kind {
        CorruptionKind::Incomplete => Edit::Incomplete {
            class: LV,
            fraction: params.systematic_removal_fraction,
            angle,
        },
        CorruptionKind::Boundary => Edit::Boundary {
            classes: FOREGROUND.to_vec(),
            op: BoundaryOp::Erode,
            radius: params.systematic_radius,
        },
        CorruptionKind::Merged => Edit::Merge {
            source: LVM,
            target: LV,
        },
    }
}

/// Draws a random-mode edit: every foreground structure is equally likely
/// to be affected, as are dilation and erosion.
pub fn random_edit(kind: CorruptionKind, params: &CorruptionParams, mask: &ClassMask, rng: &mut ChaCha8Rng) -> Result<Edit> {
    let present = present_foreground(mask);
    if present.is_empty() {
        return Err(Error::Data("mask has no foreground to corrupt".into()));
    }
    let pick = |rng: &mut ChaCha8Rng| present[rng.random_range(0..present.len())];
    Ok(match kind {
        CorruptionKind::Incomplete => {
            let (lo, hi) = params.removal_fraction;
            Edit::Incomplete {
                class: pick(rng),
                fraction: if lo < hi { rng.random_range(lo..hi) } else { lo },
                angle: rng.random_range(0.0..std::f64::consts::TAU),
            }
        }
        CorruptionKind::Boundary => Edit::Boundary {
            classes: vec![pick(rng)],
            op: if rng.random_bool(0.5) {
                BoundaryOp::Dilate
            } else {
                BoundaryOp::Erode
            },
            radius: params.radii[rng.random_range(0..params.radii.len())],
        },
        CorruptionKind::Merged => {
            if present.len() < 2 {
                return Err(Error::Data("merging needs two foreground classes".into()));
            }
            let pairs: Vec<(u8, u8)> = present
                .iter()
                .flat_map(|&s| present.iter().filter(move |&&t| t != s).map(move |&t| (s, t)))
                .collect();
            let (source, target) = pairs[rng.random_range(0..pairs.len())];
            Edit::Merge { source, target }
        }
    })
}

const MAX_REDRAWS: usize = 32;

/// Plans and applies one sample's edit, redrawing random edits that leave the mask unchanged.
pub fn corrupt_mask(mask: &ClassMask, spec: &CorruptionSpec, rng: &mut ChaCha8Rng) -> Result<(ClassMask, Edit)> {
    for _ in 0..MAX_REDRAWS {
        let edit = match spec.mode {
            CorruptionMode::Systematic => {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                systematic_policy(spec.kind, &spec.params, angle)
            }
            CorruptionMode::Random => random_edit(spec.kind, &spec.params, mask, rng)?,
        };
        let out = apply_edit(mask, &edit)?;
        if out != *mask {
            return Ok((out, edit));
        }
    }
    Err(Error::Data(format!(
        "{} corruption left the mask unchanged after {MAX_REDRAWS} draws",
        spec.kind.as_str()
    )))
}

/// Ids of the samples chosen for corruption and the edits applied to them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionOutcome {
    pub corrupted_ids: Vec<String>,
    pub edits: Vec<(String, Edit)>,
    pub warning: Option<String>,
}

/// Number of samples to corrupt: `proportion · pool` rounded half up.
pub fn corruption_count(proportion: f64, pool: usize) -> usize {
    (proportion * pool as f64 + 0.5 + 1e-9).floor() as usize
}

/// Corrupts a seeded subset of the train and validation samples in place.
/// Test samples and clean masks are never modified.
pub fn corrupt_dataset(
    samples: &mut [LabeledSample],
    manifest: &DatasetManifest,
    spec: &CorruptionSpec,
) -> Result<CorruptionOutcome> {
    spec.validate()?;
    let lookup = manifest.lookup();
    let pool: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(lookup.get(s.id.as_str()), Some(Split::Train | Split::Val)))
        .map(|(i, _)| i)
        .collect();
    let k = corruption_count(spec.proportion, pool.len());
    let mut outcome = CorruptionOutcome::default();
    if k == 0 {
        if spec.proportion > 0.0 {
            outcome.warning = Some(format!(
                "proportion {} of {} samples rounds to zero corrupted samples",
                spec.proportion,
                pool.len()
            ));
        }
        return Ok(outcome);
    }
    let mut select = rng::stream(spec.seed, rng::CORRUPT_SELECT, 0);
    let chosen: BTreeSet<usize> = index::sample(&mut select, pool.len(), k)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    for i in chosen {
        let sample = &mut samples[i];
        let mut rng = rng::stream(spec.seed, rng::CORRUPT_EDIT, i as u64);
        let (mask, edit) = corrupt_mask(&sample.mask, spec, &mut rng)
            .map_err(|e| Error::Data(format!("{}: {e}", sample.id)))?;
        sample.mask = mask;
        sample.corrupted = true;
        sample.corruption_kind = Some(spec.kind);
        outcome.corrupted_ids.push(sample.id.clone());
        outcome.edits.push((sample.id.clone(), edit));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_phantom, split_dataset, PhantomParams};
    use crate::mask::LA;

    fn square4() -> ClassMask {
        let mut m = ClassMask::new(6, 6);
        for y in 1..5 {
            for x in 1..5 {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn tiny_fraction_changes_nothing() {
        let m = square4();
        assert_eq!(incomplete_label_at_angle(&m, 1, 0.01, 0.3).unwrap(), m);
    }

    #[test]
    fn horizontal_cut_removes_top_rows() {
        let m = square4();
        let out = incomplete_label_at_angle(&m, 1, 0.5, std::f64::consts::FRAC_PI_2).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(out.get(y, x), if y < 3 { 0 } else { 1 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn incomplete_requires_class() {
        assert!(incomplete_label(&square4(), 2, 0.3, 1).is_err());
        let out = incomplete_label(&square4(), 1, 0.25, 1).unwrap();
        assert_eq!(out.diff_count(&square4()), 4);
    }

    #[test]
    fn merge_relabels_source() {
        let m = ClassMask::from_rows(&[&[1, 2, 3], &[2, 2, 0]]).unwrap();
        let out = merged_labels(&m, 2, 1).unwrap();
        assert!(!out.contains(2));
        assert_eq!(out.count(1), m.count(1) + m.count(2));
        assert_eq!(out.count(3), m.count(3));
        assert!(merged_labels(&m, 2, 2).is_err());
        assert!(merged_labels(&out, 2, 1).is_err());
    }

    #[test]
    fn dilation_overwrites_neighbours_and_erosion_vacates() {
        let m = ClassMask::from_rows(&[&[0, 0, 0], &[2, 1, 0], &[0, 0, 0]]).unwrap();
        let d = boundary_distortion(&m, 1, BoundaryOp::Dilate, 1).unwrap();
        assert_eq!(d, ClassMask::from_rows(&[&[0, 1, 0], &[1, 1, 1], &[0, 1, 0]]).unwrap());
        let e = boundary_distortion(&m, 1, BoundaryOp::Erode, 1).unwrap();
        assert!(!e.contains(1));
        assert_eq!(e.count(2), 1);
    }

    #[test]
    fn systematic_policies() {
        let p = CorruptionParams::default();
        assert!(matches!(
            systematic_policy(CorruptionKind::Incomplete, &p, 0.0),
            Edit::Incomplete { class: LV, .. }
        ));
        assert!(matches!(
            systematic_policy(CorruptionKind::Boundary, &p, 0.0),
            Edit::Boundary { op: BoundaryOp::Erode, ref classes, .. } if classes.len() == 3
        ));
        assert_eq!(
            systematic_policy(CorruptionKind::Merged, &p, 0.0),
            Edit::Merge { source: LVM, target: LV }
        );
    }

    #[test]
    fn random_mode_picks_structures_uniformly() {
        let m = ClassMask::from_rows(&[&[1, 2, 3, 0]]).unwrap();
        let p = CorruptionParams::default();
        let mut rng = rng::stream(42, rng::CORRUPT_EDIT, 0);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            match random_edit(CorruptionKind::Incomplete, &p, &m, &mut rng).unwrap() {
                Edit::Incomplete { class, .. } => counts[class as usize] += 1,
                _ => unreachable!(),
            }
        }
        for c in [LV, LVM, LA] {
            let f = counts[c as usize] as f64 / 1000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.05, "class {c}: {f}");
        }
    }

    fn dataset() -> (Vec<LabeledSample>, DatasetManifest) {
        let samples = generate_phantom(&PhantomParams {
            count: 40,
            height: 32,
            width: 32,
            ..PhantomParams::default()
        })
        .unwrap();
        let m = split_dataset(&samples, [0.8, 0.1, 0.1], 3).unwrap();
        (samples, m)
    }

    #[test]
    fn zero_proportion_is_a_no_op() {
        let (mut s, m) = dataset();
        let before = s.clone();
        let out = corrupt_dataset(&mut s, &m, &CorruptionSpec::new(CorruptionKind::Merged, CorruptionMode::Random, 0.0, 1)).unwrap();
        assert!(out.corrupted_ids.is_empty() && out.warning.is_none());
        assert_eq!(s, before);
    }

    #[test]
    fn tiny_proportion_warns() {
        let (mut s, m) = dataset();
        let out = corrupt_dataset(&mut s, &m, &CorruptionSpec::new(CorruptionKind::Merged, CorruptionMode::Random, 0.01, 1)).unwrap();
        assert!(out.corrupted_ids.is_empty());
        assert!(out.warning.is_some());
    }

    #[test]
    fn count_rounds_half_up() {
        assert_eq!(corruption_count(0.25, 450), 113);
        assert_eq!(corruption_count(0.125, 180), 23);
        assert_eq!(corruption_count(0.5, 180), 90);
        assert_eq!(corruption_count(0.0, 180), 0);
    }

    #[test]
    fn dataset_corruption_contract() {
        for kind in CorruptionKind::ALL {
            for mode in [CorruptionMode::Random, CorruptionMode::Systematic] {
                let (mut s, m) = dataset();
                let before = s.clone();
                let spec = CorruptionSpec::new(kind, mode, 0.25, 9);
                let out = corrupt_dataset(&mut s, &m, &spec).unwrap();
                assert_eq!(out.corrupted_ids.len(), corruption_count(0.25, 36));
                let ids: BTreeSet<&str> = out.corrupted_ids.iter().map(String::as_str).collect();
                for (a, b) in s.iter().zip(&before) {
                    assert_eq!(a.image, b.image);
                    assert_eq!(a.clean_mask, b.clean_mask);
                    if ids.contains(a.id.as_str()) {
                        assert_ne!(m.split_of(&a.id), Some(Split::Test));
                        assert!(a.corrupted && a.mask != a.clean_mask);
                        assert_eq!(a.corruption_kind, Some(kind));
                    } else {
                        assert_eq!(a, b);
                    }
                }
                let (mut again, _) = dataset();
                let out2 = corrupt_dataset(&mut again, &m, &spec).unwrap();
                assert_eq!(out, out2);
                assert_eq!(again, s);
            }
        }
    }
}
