//! Binary codebook checkpoints.
//!
//! Layout, all little-endian: magic `LVQC`, version `u32`, `S u32`, `D u32`,
//! then `S*D` f32 codewords, `S` f32 EMA counts and `S*D` f32 EMA sums.

use std::io::{Read, Write};
use std::path::Path;

use super::Codebook;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const MAGIC: &[u8; 4] = b"LVQC";
const VERSION: u32 = 1;

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated codebook checkpoint: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

impl<T: Real> Codebook<T> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.size() as u32, self.dim() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f32s(w, self.codes.data().iter().map(|v| v.as_f64()))?;
        write_f32s(w, self.ema_count.iter().copied())?;
        write_f32s(w, self.ema_sum.iter().copied())
    }

    pub fn read_from(r: &mut impl Read, eta: f64, epsilon: f64) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a codebook checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported codebook checkpoint version {version}")));
        }
        let size = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let codes = Tensor::from_f64(&[size, dim], &read_f32s(r, size * dim)?)?;
        let count = read_f32s(r, size)?;
        let sum = read_f32s(r, size * dim)?;
        Self::from_parts(codes, count, sum, eta, epsilon)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, eta: f64, epsilon: f64) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r, eta, epsilon)
    }
}
