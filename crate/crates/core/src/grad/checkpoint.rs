//! Versioned flat parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  b"UASCKPT\0"
//! version      u32      currently 1
//! header_len   u32      byte length of the header
//! header       bytes    UTF-8 JSON describing the architecture
//! count        u32      number of tensors
//! per tensor, in name order:
//!   name_len   u32
//!   name       bytes    UTF-8
//!   ndim       u32
//!   dims       u64 x ndim
//!   data       f64 x prod(dims), IEEE-754 bit patterns
//! ```
//!
//! Values are stored as raw bit patterns, so a save/load round trip is exact.

use std::path::Path;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UASCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(header: &str, params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

/// Parses a container, returning the header and the parameters.
pub fn decode(bytes: &[u8]) -> Result<(String, ParameterSet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = r.string(header_len)?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        params.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &str, params: &ParameterSet) -> Result<()> {
    std::fs::write(path, encode(header, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(String, ParameterSet)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(-1e6f64..1e6, 1..40),
            header in "[a-z{}\":0-9]{0,30}",
        ) {
            let mut p = ParameterSet::new();
            p.insert("b", Tensor::vector(values.clone()));
            p.insert("a.w", Tensor::new(vec![1, values.len()], values).unwrap());
            p.insert("s", Tensor::scalar(-0.0));
            let bytes = encode(&header, &p);
            let (h, q) = decode(&bytes).unwrap();
            prop_assert_eq!(&h, &header);
            prop_assert!(p.bit_equal(&q));
            prop_assert_eq!(encode(&h, &q), bytes);
        }
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode("{}", &p);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
