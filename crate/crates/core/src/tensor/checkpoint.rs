//! Binary checkpoint: magic `LGRA`, a version byte, a length-prefixed UTF-8
//! metadata blob, then `(name, shape, little-endian f64 payload)` records.
//!
//! ```text
//! "LGRA" | u8 version | u32 meta_len | meta bytes | u32 count |
//!   count × ( u32 name_len | name | u32 ndim | ndim × u64 dim | f64 × Π dim )
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGRA";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    /// Free-form metadata, JSON by convention.
    pub meta: String,
    pub tensors: Vec<(String, Tensor<S>)>,
}

pub fn encode_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.meta.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::FormatError("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::FormatError("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint<S: Scalar>(buf: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::FormatError("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatError(format!("unsupported checkpoint version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::FormatError("size overflow".into()))?,
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::FormatError(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::FormatError("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn write_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        Checkpoint {
            meta: "{\"k\":1}".into(),
            tensors: vec![
                (
                    "w".into(),
                    Tensor::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 1e-300]).unwrap(),
                ),
                ("b".into(), Tensor::from_f64(&[3], &[0.0, 0.1, -0.2]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = encode_checkpoint(&c);
        assert_eq!(&bytes[..4], b"LGRA");
        assert_eq!(bytes[4], CHECKPOINT_VERSION);
        assert_eq!(decode_checkpoint::<f64>(&bytes).unwrap(), c);
    }

    #[test]
    fn corrupt_magic_and_truncation_are_format_errors() {
        let mut bytes = encode_checkpoint(&sample());
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint::<f64>(truncated),
            Err(Error::FormatError(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::FormatError(_))));
    }
}
