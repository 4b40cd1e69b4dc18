//! Named-tensor archive.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SRCK"
//! version    u32      currently 1
//! meta_len   u32      length of the UTF-8 metadata string
//! meta       meta_len bytes (free-form, JSON by convention)
//! count      u32      number of tensors
//! manifest   count entries:
//!              name_len u32, name bytes, ndim u32, dims u64 * ndim,
//!              offset u64 (element offset into the payload)
//! payload    f64 little-endian values of every tensor, concatenated in
//!            manifest order
//! ```

use std::path::Path;

use super::dense::Tensor;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SRCK";
pub const VERSION: u32 = 1;

/// Serializes every parameter value (gradients are not stored).
pub fn encode(store: &ParamStore, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += p.value.numel() as u64;
    }
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Parses an archive into a fresh store and its metadata string.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::SchemaVersion {
            expected: VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut store = ParamStore::new();
    for (name, shape, offset) in manifest {
        let n: usize = shape.iter().product();
        let start = offset * 8;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {name} exceeds payload")));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok((store, meta))
}

pub fn save(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    std::fs::write(path, encode(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    #[test]
    fn roundtrip_exact() {
        let mut rng = SplitRng::new(3);
        let mut store = ParamStore::new();
        store.add("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        store.add("b.bias", Tensor::randn(&[5], 1.0, &mut rng));
        let bytes = encode(&store, "{\"k\":1}");
        assert_eq!(&bytes[..4], b"SRCK");
        let (back, meta) = decode(&bytes).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode(b"NOPE"), Err(Error::Format(_))));
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2]));
        let mut bytes = encode(&store, "");
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::SchemaVersion { .. })));
        let bytes = encode(&store, "");
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }
}
