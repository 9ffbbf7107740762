//! Checkpoint container (version 1), all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "VOGSEGCK"
//! version      u32      1
//! levels, base_channels, num_classes, in_channels   4 × u32
//! epoch        u64
//! val_dice     f64
//! tensors      u32      count, then per tensor:
//!   name_len u32, name (UTF-8), rank u32, dims rank × u32, values f32 × product(dims)
//! ```

use std::path::Path;

use super::train::Checkpoint;
use super::unet::{Architecture, ModelParams, NamedTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VOGSEGCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let arch = ckpt.params.architecture();
    for v in [arch.levels, arch.base_channels, arch.num_classes, arch.in_channels] {
        u32le(&mut out, v);
    }
    out.extend_from_slice(&(ckpt.epoch as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.val_dice.to_le_bytes());
    u32le(&mut out, ckpt.params.tensors().len());
    for t in ckpt.params.tensors() {
        u32le(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        u32le(&mut out, t.tensor.shape().len());
        for &d in t.tensor.shape() {
            u32le(&mut out, d);
        }
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let arch = Architecture {
        levels: r.u32("levels")?,
        base_channels: r.u32("base channels")?,
        num_classes: r.u32("classes")?,
        in_channels: r.u32("input channels")?,
    };
    let epoch = u64::from_le_bytes(r.take(8, "epoch")?.try_into().unwrap()) as usize;
    let val_dice = f64::from_le_bytes(r.take(8, "score")?.try_into().unwrap());
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("name length")?;
        let at = r.pos;
        let name = String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            message: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "tensor values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::from_vec(&shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: r.pos,
            message: "trailing bytes after the last tensor".into(),
        });
    }
    Ok(Checkpoint {
        params: ModelParams::from_tensors(arch, tensors)?,
        epoch,
        val_dice,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::<f32>::init(Architecture::default(), 5).unwrap();
        let ckpt = Checkpoint {
            params,
            epoch: 17,
            val_dice: 0.8125,
        };
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes, Path::new("m.ckpt")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let params = ModelParams::<f32>::init(Architecture::default(), 5).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            params,
            epoch: 1,
            val_dice: 0.5,
        });
        let p = Path::new("t.ckpt");
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        assert!(decode_checkpoint(b"nonsense", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, p).is_err());
    }
}
