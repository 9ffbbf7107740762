//! Binary PGM (P5) rasters with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit grayscale raster as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
    /// Byte offset of the first pixel in the encoded file.
    pub data_offset: usize,
}

pub fn encode(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Gray8> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(cur.fail("missing P5 magic number"));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(cur.fail(format!("maxval {maxval} is not an 8-bit depth")));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.fail("header must end with a single whitespace byte"));
    }
    cur.pos += 1;
    let need = width * height;
    if bytes.len() - cur.pos < need {
        return Err(cur.fail(format!(
            "expected {need} pixel bytes, found {}",
            bytes.len() - cur.pos
        )));
    }
    Ok(Gray8 {
        height,
        width,
        maxval: maxval as u8,
        pixels: bytes[cur.pos..cur.pos + need].to_vec(),
        data_offset: cur.pos,
    })
}

pub fn read(path: &Path) -> Result<Gray8> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}

pub fn write(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode(height, width, pixels))?;
    Ok(())
}

/// Maps `[0, 1]` intensities to 8-bit levels.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}
