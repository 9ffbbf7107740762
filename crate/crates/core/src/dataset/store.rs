//! Dataset directories: a `dataset.json` header, a `manifest.jsonl` with one
//! record per sample, and PGM rasters under `images/`, `masks/` and
//! `clean_masks/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{pgm, DatasetManifest, LabeledSample, Split};
use crate::corruption::CorruptionKind;
use crate::error::{Error, Result};
use crate::mask::{ClassMask, NUM_CLASSES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub clean_mask_path: String,
    pub split: Split,
    pub corrupted: bool,
    pub corruption_kind: Option<CorruptionKind>,
}

#[derive(Clone, Debug)]
pub struct SamplePaths {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub clean_mask: PathBuf,
}

impl SamplePaths {
    pub fn under(dir: &Path, id: &str) -> Self {
        SamplePaths {
            image: dir.join("images").join(format!("{id}.pgm")),
            mask: dir.join("masks").join(format!("{id}.pgm")),
            clean_mask: dir.join("clean_masks").join(format!("{id}.pgm")),
        }
    }
}

fn write_mask(path: &Path, mask: &ClassMask) -> Result<()> {
    if let Some(c) = mask.max_class().filter(|&c| c as usize >= NUM_CLASSES) {
        return Err(Error::Data(format!(
            "{}: class index {c} is outside [0, {NUM_CLASSES})",
            path.display()
        )));
    }
    pgm::write(path, mask.height(), mask.width(), mask.data())
}

pub fn write_sample(paths: &SamplePaths, sample: &LabeledSample) -> Result<()> {
    for p in [&paths.image, &paths.mask, &paths.clean_mask] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    let (h, w) = sample.dims();
    let pixels: Vec<u8> = sample.image.data().iter().map(|&v| pgm::quantize(v)).collect();
    pgm::write(&paths.image, h, w, &pixels)?;
    write_mask(&paths.mask, &sample.mask)?;
    write_mask(&paths.clean_mask, &sample.clean_mask)
}

fn read_mask(path: &Path) -> Result<ClassMask> {
    let raster = pgm::read(path)?;
    if let Some(i) = raster.pixels.iter().position(|&v| v as usize >= NUM_CLASSES) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: raster.data_offset + i,
            message: format!(
                "class index {} at pixel (row {}, col {}) is outside [0, {NUM_CLASSES})",
                raster.pixels[i],
                i / raster.width,
                i % raster.width
            ),
        });
    }
    ClassMask::from_vec(raster.height, raster.width, raster.pixels)
}

pub fn read_sample(id: &str, paths: &SamplePaths) -> Result<LabeledSample> {
    let raster = pgm::read(&paths.image)?;
    let scale = 1.0 / raster.maxval as f32;
    let image = Tensor::from_vec(
        &[1, raster.height, raster.width],
        raster
            .pixels
            .iter()
            .map(|&q| {
                if raster.maxval == 255 {
                    pgm::dequantize(q)
                } else {
                    q as f32 * scale
                }
            })
            .collect(),
    )?;
    let mask = read_mask(&paths.mask)?;
    let clean_mask = read_mask(&paths.clean_mask)?;
    let mut sample = LabeledSample::new(id, image, clean_mask.clone())?;
    if mask.dims() != clean_mask.dims() {
        return Err(Error::Shape(format!("{id}: mask and clean mask sizes differ")));
    }
    sample.mask = mask;
    Ok(sample)
}

fn relative(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn write_dataset(dir: &Path, samples: &[LabeledSample], manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let lookup = manifest.lookup();
    let mut lines = Vec::new();
    for s in samples {
        let split = *lookup
            .get(s.id.as_str())
            .ok_or_else(|| Error::Data(format!("sample {} has no split assignment", s.id)))?;
        let paths = SamplePaths::under(dir, &s.id);
        write_sample(&paths, s)?;
        let record = ManifestRecord {
            id: s.id.clone(),
            image_path: relative(dir, &paths.image),
            mask_path: relative(dir, &paths.mask),
            clean_mask_path: relative(dir, &paths.clean_mask),
            split,
            corrupted: s.corrupted,
            corruption_kind: s.corruption_kind,
        };
        lines.push(serde_json::to_string(&record)?);
    }
    let mut f = fs::File::create(dir.join("manifest.jsonl"))?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<LabeledSample>, DatasetManifest)> {
    let header_path = dir.join("dataset.json");
    let header: DatasetManifest = serde_json::from_str(&fs::read_to_string(&header_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", header_path.display())))?;
    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path)?;
    let mut samples = Vec::new();
    let mut assignments = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{} line {}: {e}", manifest_path.display(), line_no + 1))
        })?;
        let paths = SamplePaths {
            image: dir.join(&rec.image_path),
            mask: dir.join(&rec.mask_path),
            clean_mask: dir.join(&rec.clean_mask_path),
        };
        let mut s = read_sample(&rec.id, &paths)?;
        s.corrupted = rec.corrupted;
        s.corruption_kind = rec.corruption_kind;
        if !s.corrupted && s.mask != s.clean_mask {
            return Err(Error::Data(format!(
                "{}: mask differs from clean mask but the sample is not flagged corrupted",
                rec.id
            )));
        }
        assignments.push((rec.id, rec.split));
        samples.push(s);
    }
    Ok((
        samples,
        DatasetManifest {
            assignments,
            ..header
        },
    ))
}

/// SHA-256 over every sample's id, quantized image, masks and corruption flags.
pub fn dataset_digest(samples: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        let (rows, cols) = s.dims();
        h.update((rows as u64).to_le_bytes());
        h.update((cols as u64).to_le_bytes());
        let px: Vec<u8> = s.image.data().iter().map(|&v| pgm::quantize(v)).collect();
        h.update(&px);
        h.update(s.mask.data());
        h.update(s.clean_mask.data());
        h.update([s.corrupted as u8, s.corruption_kind.map_or(0, |k| k as u8 + 1)]);
    }
    hex::encode(h.finalize())
}
