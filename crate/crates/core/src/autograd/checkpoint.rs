//! Parameter archives.
//!
//! Layout (little-endian): `"HCK1"`, `u32` manifest length, UTF-8 JSON
//! manifest, `u32` record count, then per record `u32` name length, name,
//! `u32` rank, `u32` axis lengths and the `f64` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(manifest: Value, store: &ParamStore) -> Self {
        Self {
            manifest,
            params: store
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    /// Copies every record into the same-named parameter of `store`.
    /// Missing or extra names are errors.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name:?} in checkpoint")))?;
            store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = self.manifest.to_string();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mlen = r.u32()? as usize;
        let manifest: Value = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if !r.bytes.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self { manifest, params })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn bit_exact_round_trip_through_file() {
        let mut store = ParamStore::new();
        store
            .register(
                "enc.0.w",
                Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            )
            .unwrap();
        store.register("hco.0.fve", Tensor::full(&[3, 1, 2], 0.25)).unwrap();
        let ckpt = Checkpoint::from_store(json!({"variant": "umh"}), &store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.write_atomic(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.manifest, ckpt.manifest);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(&ckpt.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let mut fresh = ParamStore::new();
        fresh.register("enc.0.w", Tensor::zeros(&[2, 2])).unwrap();
        fresh.register("hco.0.fve", Tensor::zeros(&[3, 1, 2])).unwrap();
        back.load_into(&mut fresh).unwrap();
        assert_eq!(fresh.value(fresh.by_name("hco.0.fve").unwrap()).data()[5], 0.25);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::zeros(&[2])).unwrap();
        let ckpt = Checkpoint::from_store(json!({}), &store);
        let mut other = ParamStore::new();
        other.register("b", Tensor::zeros(&[2])).unwrap();
        assert!(ckpt.load_into(&mut other).is_err());
        let mut wrong_shape = ParamStore::new();
        wrong_shape.register("a", Tensor::zeros(&[3])).unwrap();
        assert!(ckpt.load_into(&mut wrong_shape).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::zeros(&[4])).unwrap();
        let bytes = Checkpoint::from_store(json!({}), &store).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
