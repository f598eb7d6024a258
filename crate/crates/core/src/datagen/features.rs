//! Binary tensor file ("EPSF"): magic, version byte, rank and dims as
//! little-endian `u32`, then the row-major payload as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"EPSF";
pub const FEATURE_VERSION: u8 = 1;

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::parse(path, "bad magic at offset 0"));
    }
    let version = r.take(1)?[0];
    if version != FEATURE_VERSION {
        return Err(Error::parse(path, format!("unsupported version {version} at offset 4")));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::parse(path, format!("rank {rank} at offset 5 is too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(Error::parse(path, format!("zero dimension at offset {at}")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::parse(path, format!("dimension overflow at offset {at}")))?;
        shape.push(d);
    }
    let payload = bytes.len() - r.pos;
    if numel.checked_mul(4) != Some(payload) {
        return Err(Error::parse(
            path,
            format!(
                "header dims {shape:?} need {} payload bytes, found {payload} at offset {}",
                numel.saturating_mul(4),
                r.pos
            ),
        ));
    }
    let data = bytes[r.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_features(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_features(t)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.path,
                format!("truncated: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
