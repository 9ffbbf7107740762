//! Binary morphology on row-major boolean rasters.
//!
//! Pixels outside the canvas count as background: dilation clips at the
//! border and erosion removes any pixel whose element reaches off-canvas.

use crate::error::{Error, Result};

/// Disk-shaped structuring element: the 4-neighbourhood diamond at radius 1,
/// the Euclidean disk `dx² + dy² ≤ r²` for larger radii.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    radius: usize,
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    pub fn disk(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::Config("structuring element radius must be >= 1".into()));
        }
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let inside = if radius == 1 {
                    dy.abs() + dx.abs() <= 1
                } else {
                    dy * dy + dx * dx <= r * r
                };
                if inside {
                    offsets.push((dy, dx));
                }
            }
        }
        Ok(StructuringElement { radius, offsets })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

fn check(region: &[bool], height: usize, width: usize) {
    assert_eq!(region.len(), height * width, "region does not match canvas");
}

pub fn dilate(region: &[bool], height: usize, width: usize, se: &StructuringElement) -> Vec<bool> {
    check(region, height, width);
    let mut out = vec![false; region.len()];
    for y in 0..height {
        for x in 0..width {
            if !region[y * width + x] {
                continue;
            }
            for &(dy, dx) in &se.offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < height && (nx as usize) < width {
                    out[ny as usize * width + nx as usize] = true;
                }
            }
        }
    }
    out
}

pub fn erode(region: &[bool], height: usize, width: usize, se: &StructuringElement) -> Vec<bool> {
    check(region, height, width);
    let mut out = vec![false; region.len()];
    for y in 0..height {
        for x in 0..width {
            if !region[y * width + x] {
                continue;
            }
            out[y * width + x] = se.offsets.iter().all(|&(dy, dx)| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny >= 0
                    && nx >= 0
                    && (ny as usize) < height
                    && (nx as usize) < width
                    && region[ny as usize * width + nx as usize]
            });
        }
    }
    out
}
