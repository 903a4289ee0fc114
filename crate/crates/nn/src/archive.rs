//! Flat binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "XVQATNS\0"
//! version    u32      currently 1
//! count      u32      number of entries
//! entry*     name_len u32, name utf-8, group_len u32, group utf-8,
//!            ndim u32, dims u64 × ndim, offset u64 (in values)
//! payload    f64 little-endian, entries back to back
//! ```
//!
//! Values are stored by bit pattern, so a round trip is bit-exact.

use std::path::Path;

use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::{NnError, Result};

pub const MAGIC: &[u8; 8] = b"XVQATNS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub group: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub entries: Vec<ArchiveEntry>,
}

fn err(msg: impl Into<String>) -> NnError {
    NnError::Archive(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated"))?;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("name is not utf-8"))
    }
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, tensor: Tensor) {
        self.entries.push(ArchiveEntry { name: name.into(), group: group.into(), tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn from_params(params: &ParamSet) -> Self {
        let mut a = Self::new();
        for p in params.iter() {
            a.push(p.name.clone(), p.group.clone(), p.tensor.clone());
        }
        a
    }

    pub fn into_params(self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        for e in self.entries {
            ps.insert(e.name, e.group, e.tensor).map_err(|e| err(e.to_string()))?;
        }
        Ok(ps)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            for s in [&e.name, &e.group] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.tensor.numel() as u64;
        }
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(err(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let group = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            headers.push((name, group, shape, offset));
        }
        let payload = &buf[r.pos..];
        let mut archive = Self::new();
        for (name, group, shape, offset) in headers {
            let numel: usize = shape.iter().product();
            let start = offset.checked_mul(8).ok_or_else(|| err("offset overflow"))?;
            let end = start + numel * 8;
            if end > payload.len() {
                return Err(err(format!("payload too short for {name}")));
            }
            let data = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| err(format!("{name}: {e}")))?;
            archive.push(name, group, tensor);
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(-1e300f64..1e300, r * c).prop_map(move |v| (r, c, v))
                }),
                0..5,
            )
        ) {
            let mut a = TensorArchive::new();
            for (i, (r, c, v)) in tensors.into_iter().enumerate() {
                a.push(format!("t{i}"), if i % 2 == 0 { "even" } else { "odd" }, Tensor::new(vec![r, c], v).unwrap());
            }
            let bytes = a.to_bytes();
            let b = TensorArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(b.entries.len(), a.entries.len());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(&x.name, &y.name);
                prop_assert_eq!(&x.group, &y.group);
                prop_assert!(x.tensor.bit_eq(&y.tensor));
            }
            prop_assert_eq!(b.to_bytes(), bytes);
        }
    }

    #[test]
    fn header_layout_and_corruption() {
        let mut a = TensorArchive::new();
        a.push("w", "backbone", Tensor::new(vec![2], vec![1.0, -0.0]).unwrap());
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // -0.0 survives as a distinct bit pattern
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(b.entries[0].tensor.data()[1].to_bits(), (-0.0f64).to_bits());
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(TensorArchive::from_bytes(&bad).is_err());
    }
}
