//! `FWS1` parameter snapshots.
//!
//! Layout, little endian: magic `FWS1`, `u32` entry count, then per entry a
//! `u32` name length and UTF-8 name, a `u32` rank and `u64` extents, and
//! the `f64` values in row-major order.

use std::fs;
use std::path::Path;

use fedicra_core::params::ParamSet;
use fedicra_core::tensor::Tensor;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FWS1";

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_elements() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode(buf: &[u8]) -> Option<ParamSet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return None;
    }
    let count = r.u32()?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).ok()?.to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Option<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let bytes = r.take(n.checked_mul(8)?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        set.push(name, Tensor::new(&shape, data).ok()?);
    }
    (r.pos == buf.len()).then_some(set)
}

pub fn write(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode(params)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<ParamSet> {
    let buf = fs::read(path).map_err(Error::io(path))?;
    decode(&buf).ok_or_else(|| Error::format(path, "not a valid FWS1 snapshot"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut set = ParamSet::new();
        set.push("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        set.push("b", Tensor::scalar(f64::MIN_POSITIVE));
        let bytes = encode(&set);
        assert_eq!(&bytes[..4], b"FWS1");
        assert_eq!(decode(&bytes).unwrap(), set);
    }

    #[test]
    fn truncated_or_foreign_input_is_rejected() {
        let mut set = ParamSet::new();
        set.push("x", Tensor::zeros(&[4]));
        let bytes = encode(&set);
        assert!(decode(&bytes[..bytes.len() - 1]).is_none());
        assert!(decode(b"FWS2\0\0\0\0").is_none());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_none());
    }
}
