//! Class-index rasters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const LVM: u8 = 2;
pub const LA: u8 = 3;
pub const FOREGROUND: [u8; 3] = [LV, LVM, LA];

/// A single-channel raster of class indices, row-major.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize) -> Self {
        ClassMask {
            height,
            width,
            data: vec![BACKGROUND; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ClassMask {
            height,
            width,
            data,
        })
    }

    /// Builds a mask from rows of equal length; handy in tests.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged mask rows".into()));
        }
        Ok(ClassMask {
            height,
            width,
            data: rows.concat(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    pub fn indicator(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn max_class(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Number of pixels whose class differs between the two masks.
    pub fn diff_count(&self, other: &ClassMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count()
    }
}

impl std::fmt::Debug for ClassMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "ClassMask {}x{}", self.height, self.width)?;
        if self.height * self.width <= 256 {
            for row in self.data.chunks(self.width.max(1)) {
                let line: String = row.iter().map(|v| char::from(b'0' + v)).collect();
                writeln!(f, "  {line}")?;
            }
        }
        Ok(())
    }
}
