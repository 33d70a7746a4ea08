//! Versioned binary container: magic, format version, a JSON header, then a
//! flat little-endian f32 payload. Network checkpoints and other tensor-like
//! artifacts share it.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "VTONBLOB"
//! 8       4     format version (u32 LE)
//! 12      4     header length in bytes (u32 LE)
//! 16      n     header, UTF-8 JSON
//! 16+n    4*k   payload, f32 LE
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::nn::ParamStore;
use crate::Tensor;

pub const MAGIC: &[u8; 8] = b"VTONBLOB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload truncated: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint does not match network: {0}")]
    Mismatch(String),
}

pub fn write_container(
    mut out: impl Write,
    header: &Value,
    payload: &[f32],
) -> Result<(), ContainerError> {
    let header = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_container(mut input: impl Read) -> Result<(Value, Vec<f32>), ContainerError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    input.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut header)?;
    let header: Value = serde_json::from_slice(&header)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if rest.len() % 4 != 0 {
        return Err(ContainerError::Truncated {
            expected: rest.len().div_ceil(4),
            found: rest.len() / 4,
        });
    }
    let payload = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: caller metadata plus named tensors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: Value,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Gather several stores under name prefixes (`"<prefix>.<param>"`).
    pub fn from_stores(meta: Value, stores: &[(&str, &ParamStore)]) -> Self {
        let tensors = stores
            .iter()
            .flat_map(|(prefix, store)| {
                store
                    .named_tensors()
                    .map(move |(name, t)| (format!("{prefix}.{name}"), t.clone()))
            })
            .collect();
        Self { meta, tensors }
    }

    pub fn write(&self, out: impl Write) -> Result<(), ContainerError> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        }
        let header = CheckpointHeader {
            kind: "checkpoint".into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        write_container(out, &serde_json::to_value(header)?, &payload)
    }

    pub fn read(input: impl Read) -> Result<Self, ContainerError> {
        let (header, payload) = read_container(input)?;
        let header: CheckpointHeader = serde_json::from_value(header)?;
        if header.kind != "checkpoint" {
            return Err(ContainerError::Mismatch(format!(
                "expected a checkpoint, found a '{}' container",
                header.kind
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len;
            if end > payload.len() {
                return Err(ContainerError::Truncated {
                    expected: end,
                    found: payload.len(),
                });
            }
            tensors.push((
                entry.name,
                Tensor::new(&entry.shape, payload[entry.offset..end].to_vec()),
            ));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ContainerError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ContainerError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Copy the tensors stored under `prefix` into `store`. Every entry of
    /// the store must be present with an identical shape.
    pub fn restore(&self, prefix: &str, store: &mut ParamStore) -> Result<(), ContainerError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{prefix}.{}", store.name(id));
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| ContainerError::Mismatch(format!("missing tensor {key}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(ContainerError::Mismatch(format!(
                    "{key}: stored shape {:?}, network expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn checkpoint_round_trip_restores_store() {
        let mut store = ParamStore::new();
        let a = store.add("conv.weight", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]));
        store.add_buffer("bn.running_var", Tensor::ones(&[3]));
        let ckpt = Checkpoint::from_stores(json!({"step": 7}), &[("gen", &store)]);
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);

        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back.meta["step"], 7);
        let mut fresh = store.clone();
        fresh.set(a, Tensor::zeros(&[2, 2]));
        back.restore("gen", &mut fresh).unwrap();
        assert_eq!(fresh.get(a).data(), &[1.0, -2.0, 3.5, 0.25]);
    }

    #[test]
    fn rejects_bad_magic_and_shape_mismatch() {
        assert!(matches!(
            Checkpoint::read(&b"NOTABLOBxxxxxxxx"[..]),
            Err(ContainerError::BadMagic)
        ));
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        let ckpt = Checkpoint::from_stores(json!(null), &[("m", &store)]);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3]));
        assert!(matches!(
            ckpt.restore("m", &mut other),
            Err(ContainerError::Mismatch(_))
        ));
    }
}
