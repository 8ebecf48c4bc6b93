//! Binary checkpoint format for named parameters.
//!
//! Layout (all integers little-endian):
//!   magic   4 bytes  "BGCK"
//!   version u16      currently 1
//!   count   u32      number of entries
//! then per entry:
//!   name_len u32, name UTF-8, rank u32, extents u32 * rank,
//!   data f32 * product(extents)
//!
//! Round-trips are bit-exact: values are stored as f32 and the store order
//! is preserved.

use super::{ParamStore, Scalar, Tensor};
use crate::error::Error;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> crate::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint into a fresh store, converting to the requested scalar.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> crate::Result<ParamStore<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "checkpoint magic mismatch: expected {:?}, got {:?}",
            CHECKPOINT_MAGIC, magic
        )));
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version mismatch: expected {CHECKPOINT_VERSION}, got {version}"
        )));
    }
    let count = cur.u32("count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Data("checkpoint name is not valid UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::from_f32(cur.f32("tensor data")?));
        }
        let tensor = Tensor::new(shape, data).map_err(Error::Tensor)?;
        store.add(name, tensor);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(store)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> crate::Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated while reading {field}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> crate::Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> crate::Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, field: &str) -> crate::Result<f32> {
        let b = self.take(4, field)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bgck");
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.1, 7.5, -0.0]).unwrap());
        store.add("b", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        save_checkpoint(&store, &path).unwrap();
        let loaded: ParamStore<f32> = load_checkpoint(&path).unwrap();
        let path2 = dir.path().join("ck2.bgck");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
        assert_eq!(loaded.get(loaded.id_by_name("a.w").unwrap()).shape(), &[2, 3]);
    }

    #[test]
    fn wrong_magic_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bgck");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bgck");
        fs::write(&path, b"BGCK\x01\x00").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
