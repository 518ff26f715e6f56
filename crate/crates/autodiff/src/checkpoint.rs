//! Parameter checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"CTGP"
//! version    u32 = 1
//! width      u32          bytes per value: 4 (f32) or 8 (f64)
//! meta_len   u32, then meta_len bytes of UTF-8 metadata
//! count      u32          number of parameters
//! per parameter:
//!   name_len u32, name bytes (UTF-8)
//!   lr_mult  f64
//!   ndim     u32, then ndim x u32 dimensions
//!   values   product(dims) x width bytes, row-major
//! ```
//!
//! Values are stored at their in-memory width, so a save/load cycle is
//! bit-exact.

use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CTGP";
const VERSION: u32 = 1;

pub fn encode<F: Scalar>(params: &ParamStore<F>, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, F::BYTES as u32);
    put_u32(&mut out, metadata.len() as u32);
    out.extend_from_slice(metadata.as_bytes());
    put_u32(&mut out, params.len() as u32);
    for (_, p) in params.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&p.lr_mult.to_le_bytes());
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Decodes an archive into a fresh store plus its metadata string.
pub fn decode<F: Scalar>(bytes: &[u8]) -> Result<(ParamStore<F>, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let width = r.u32()? as usize;
    if width != F::BYTES {
        return Err(bad(format!("stored {width}-byte values, expected {}", F::BYTES)));
    }
    let meta_len = r.u32()? as usize;
    let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| bad("metadata is not UTF-8"))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let lr_mult = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| bad("size overflow"))?)?;
        let data = raw.chunks(width).map(F::read_le).collect();
        let value = Tensor::new(shape, data)?;
        store.add_with_mult(name, value, lr_mult)?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((store, metadata))
}

pub fn save<F: Scalar>(path: impl AsRef<Path>, params: &ParamStore<F>, metadata: &str) -> Result<()> {
    std::fs::write(path, encode(params, metadata))?;
    Ok(())
}

pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<(ParamStore<F>, String)> {
    decode(&std::fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_corrupt_archives() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let bytes = encode(&s, "{}");
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode::<f32>(&wrong).is_err());
        assert!(decode::<f64>(&bytes).is_err());
        let (back, meta) = decode::<f32>(&bytes).unwrap();
        assert_eq!(meta, "{}");
        assert_eq!(back.value(back.id("w").unwrap()), s.value(s.id("w").unwrap()));
    }
}
