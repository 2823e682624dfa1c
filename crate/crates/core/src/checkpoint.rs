//! DUQC checkpoints: magic, version, a JSON header describing the model and
//! its stores, then every block as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{BlockLayout, ParamStore};
use crate::error::{DuqError, Result};

pub const MAGIC: &[u8; 4] = b"DUQC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreLayout {
    pub name: String,
    pub blocks: Vec<BlockLayout>,
}

impl StoreLayout {
    pub fn of(store: &ParamStore) -> Self {
        StoreLayout {
            name: store.name().to_string(),
            blocks: store.layout(),
        }
    }

    fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub method: String,
    pub seed: u64,
    /// Everything needed to rebuild the architecture and resume training.
    pub config: serde_json::Value,
    pub stores: Vec<StoreLayout>,
}

/// A decoded checkpoint; values are widened back to `f64`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Vec<f64>>,
}

pub fn encode(
    method: &str,
    seed: u64,
    config: &impl Serialize,
    stores: &[&ParamStore],
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        method: method.to_string(),
        seed,
        config: serde_json::to_value(config)?,
        stores: stores.iter().map(|s| StoreLayout::of(s)).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let values: usize = stores.iter().map(|s| s.num_values()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in stores {
        for v in s.flatten() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> DuqError {
    DuqError::Format {
        offset,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| format_err(offset, "truncated header"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(format_err(0, "missing DUQC magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(format_err(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| format_err(12, "truncated JSON header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json)
        .map_err(|e| format_err(12, format!("bad JSON header: {e}")))?;
    let mut off = 12 + len;
    let expected: usize = header.stores.iter().map(|s| s.num_values()).sum();
    if bytes.len() != off + 4 * expected {
        return Err(format_err(
            off,
            format!(
                "header describes {expected} values but {} payload bytes follow",
                bytes.len() - off
            ),
        ));
    }
    let mut values = Vec::with_capacity(header.stores.len());
    for s in &header.stores {
        let n = s.num_values();
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let x = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("four bytes"));
            if !x.is_finite() {
                return Err(format_err(
                    off,
                    format!("non-finite value in store '{}'", s.name),
                ));
            }
            v.push(x as f64);
            off += 4;
        }
        values.push(v);
    }
    Ok(Checkpoint { header, values })
}

pub fn write(
    path: impl AsRef<Path>,
    method: &str,
    seed: u64,
    config: &impl Serialize,
    stores: &[&ParamStore],
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(method, seed, config, stores)?).map_err(|e| DuqError::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| DuqError::io(path, e))?)
}

impl Checkpoint {
    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    /// Copies values into freshly built stores after checking that their
    /// layouts match the header exactly.
    pub fn load_into(&self, stores: &mut [&mut ParamStore]) -> Result<()> {
        if stores.len() != self.header.stores.len() {
            return Err(DuqError::Validation(format!(
                "checkpoint holds {} stores, model has {}",
                self.header.stores.len(),
                stores.len()
            )));
        }
        for ((store, layout), values) in
            stores.iter_mut().zip(&self.header.stores).zip(&self.values)
        {
            if StoreLayout::of(store) != *layout {
                return Err(DuqError::Validation(format!(
                    "store '{}' does not match the checkpoint layout of '{}'",
                    store.name(),
                    layout.name
                )));
            }
            store.load_flat(values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new("theta");
        s.register("a.weight", vec![0.1, -2.5, 3.0], true);
        s.register("a.mean", vec![0.25], false);
        s
    }

    #[test]
    fn roundtrip_and_layout_check() {
        let s = store();
        let bytes = encode("full", 7, &serde_json::json!({"epochs": 2}), &[&s]).unwrap();
        assert_eq!(&bytes[..4], b"DUQC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.header.method, "full");
        assert_eq!(ck.header.seed, 7);
        let mut t = store();
        t.load_flat(&[0.0; 4]).unwrap();
        ck.load_into(&mut [&mut t]).unwrap();
        assert_eq!(t.flatten(), vec![0.1f32 as f64, -2.5, 3.0, 0.25]);
        let mut other = ParamStore::new("theta");
        other.register("b", vec![0.0; 4], true);
        assert!(matches!(
            ck.load_into(&mut [&mut other]),
            Err(DuqError::Validation(_))
        ));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode("full", 0, &0, &[&store()]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode(&bad),
            Err(DuqError::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 2]),
            Err(DuqError::Format { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode(&v2),
            Err(DuqError::Format { offset: 4, .. })
        ));
    }
}
