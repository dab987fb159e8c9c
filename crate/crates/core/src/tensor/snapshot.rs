//! Binary container for named tensors, used for checkpoints and tensor
//! datasets.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   b"GMRLTNS1"
//! count      u32       number of entries
//! entry*     count times:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   rank     u32       0..=5
//!   dims     rank x u64
//!   values   prod(dims) x f64, row-major
//! ```
//!
//! A file holding a single tensor is simply a container with one entry.

use std::fs;
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{GmrlError, Result};

pub const MAGIC: &[u8; 8] = b"GMRLTNS1";

pub fn encode(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let payload: usize = entries
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.dims().len() + 8 * t.numel())
        .sum();
    let mut buf = Vec::with_capacity(12 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.dims().len() as u32).to_le_bytes());
        for &d in tensor.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
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
            .ok_or_else(|| GmrlError::Data(format!("snapshot truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(GmrlError::Data("not a tensor snapshot (bad magic)".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| GmrlError::Data("snapshot entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > Shape::MAX_RANK {
            return Err(GmrlError::Data(format!("snapshot entry `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = Shape::new(dims).map_err(|e| GmrlError::Data(format!("entry `{name}`: {e}")))?;
        let raw = r.take(shape.numel().checked_mul(8).ok_or_else(|| {
            GmrlError::Data(format!("entry `{name}` is too large"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(GmrlError::Data(format!(
            "{} trailing bytes after snapshot entries",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| GmrlError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| GmrlError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[2], vec![1.0, -0.5]).unwrap();
        let bytes = encode(&[("x", &t)]);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b'x');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(&bytes[21..29], &2u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 45);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("a", &t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let back = decode(&encode(&[("p", &t), ("q", &t)])).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "p");
            let same = back[1].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back[1].1.dims(), t.dims());
        }
    }
}
