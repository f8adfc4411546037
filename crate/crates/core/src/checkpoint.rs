//! `.lprn` single-file checkpoint container.
//!
//! Layout: `b"LPRN"`, `u32` LE format version, `u64` LE manifest length,
//! UTF-8 JSON manifest, then the raw little-endian `f32` payload. Tensor
//! offsets in the manifest are relative to the payload start.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, WeightStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPRN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, store: &WeightStore) -> Result<()> {
    let bytes = encode(spec, store)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Serializes tensors in the model's canonical parameter order.
pub fn encode(spec: &ModelSpec, store: &WeightStore) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, _) in spec.parameter_shapes() {
        let t = store.get(&name);
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("cannot serialize manifest: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, WeightStore)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn truncated(what: &str) -> Error {
    Error::io(
        "<checkpoint>",
        io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

pub fn decode(bytes: &[u8]) -> Result<(ModelSpec, WeightStore)> {
    if bytes.len() < 4 {
        return Err(truncated("header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < 16 {
        return Err(truncated("header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize
        .checked_add(manifest_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| truncated("manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
        .map_err(|e| Error::Format(format!("invalid manifest: {e}")))?;
    manifest.spec.validate()?;
    let payload = &bytes[manifest_end..];

    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Validation {
                name: entry.name.clone(),
                reason: format!("unsupported dtype `{}`", entry.dtype),
            });
        }
        let count: usize = entry.shape.iter().product();
        if entry.byte_len != 4 * count as u64 {
            return Err(Error::Validation {
                name: entry.name.clone(),
                reason: format!("byte_len {} does not match shape {:?}", entry.byte_len, entry.shape),
            });
        }
        let start = entry.byte_offset as usize;
        let end = start
            .checked_add(entry.byte_len as usize)
            .filter(|end| *end <= payload.len())
            .ok_or_else(|| truncated(&format!("payload for `{}`", entry.name)))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Validation {
            name: entry.name.clone(),
            reason: e.to_string(),
        })?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Validation {
                name: entry.name.clone(),
                reason: "duplicate entry".into(),
            });
        }
    }
    let store = WeightStore::new(&manifest.spec, tensors)?;
    Ok((manifest.spec, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random;

    fn toy() -> (ModelSpec, WeightStore) {
        let spec = ModelSpec::toy(4, 16, 64);
        let store = init_random(&spec, 5).unwrap();
        (spec, store)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (spec, store) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.lprn");
        save_checkpoint(&path, &spec, &store).unwrap();
        let (spec2, store2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        for (name, t) in store.iter() {
            let other = store2.get(name);
            assert_eq!(t.shape(), other.shape());
            assert!(t.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // re-encoding is byte identical
        assert_eq!(encode(&spec, &store).unwrap(), encode(&spec2, &store2).unwrap());
    }

    #[test]
    fn bad_magic_and_version() {
        let (spec, store) = toy();
        let mut bytes = encode(&spec, &store).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&spec, &store).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let (spec, store) = toy();
        let bytes = encode(&spec, &store).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(cut), Err(Error::Io { .. })));
    }

    #[test]
    fn missing_tensor_is_named() {
        let (spec, store) = toy();
        let mut map = store.into_inner();
        map.remove("final_norm.gain");
        // bypass WeightStore validation by hand-building the container
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in &map {
            let off = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: off,
                byte_len: payload.len() as u64 - off,
            });
        }
        let json = serde_json::to_vec(&Manifest { spec, tensors: entries }).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&payload);
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("final_norm.gain"), "{err}");
    }
}
