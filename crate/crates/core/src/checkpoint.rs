//! Named-tensor checkpoint store and its single-file format.
//!
//! Layout: 8 magic bytes, u32 format version, u64 header length, JSON
//! header (config + tensor index with byte offsets), raw little-endian
//! f32 payload in canonical tensor order, trailing u64 FNV-1a digest of
//! the payload. Writes go to a temp file followed by an atomic rename.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_specs, ModelConfig};
use crate::rng::{fnv1a64, Digest};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LYRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Checkpoint {
    /// A checkpoint with no tensors yet; populate with [`Checkpoint::insert`]
    /// and seal with [`Checkpoint::validate`].
    pub fn empty(config: ModelConfig) -> Self {
        Checkpoint {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(&name) {
            return Err(Error::UnexpectedTensor { name });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Swap in a tensor of identical shape.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
            })?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "replace",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor {
                name: name.to_string(),
            })
    }

    pub fn block_tensor(&self, i: usize, role: &str) -> Result<&Tensor> {
        self.tensor(&format!("block.{i}.{role}"))
    }

    /// Remove a tensor for in-place update loops; pair with
    /// [`Checkpoint::put_tensor`] before the checkpoint is used again.
    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor> {
        self.tensors.remove(name).ok_or_else(|| Error::MissingTensor {
            name: name.to_string(),
        })
    }

    pub fn put_tensor(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Tensor names in canonical order (embed, block.0..L-1, final_norm,
    /// head), as implied by the config.
    pub fn canonical_names(&self) -> Vec<String> {
        tensor_specs(&self.config)
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Iterate tensors in canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        tensor_specs(&self.config).into_iter().map(move |(n, _)| {
            let (key, tensor) = self
                .tensors
                .get_key_value(&n)
                .unwrap_or_else(|| panic!("validated checkpoint missing {n}"));
            (key.as_str(), tensor)
        })
    }

    /// Check the name set and every shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = tensor_specs(&self.config);
        for (name, shape) in &specs {
            let t = self.tensors.get(name).ok_or_else(|| Error::MissingTensor {
                name: name.clone(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
        }
        if self.tensors.len() != specs.len() {
            let expected: std::collections::BTreeSet<&String> =
                specs.iter().map(|(n, _)| n).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnexpectedTensor { name: extra });
        }
        Ok(())
    }

    /// FNV-1a digest of the full payload in canonical order.
    pub fn payload_digest(&self) -> u64 {
        let mut d = Digest::new();
        for (_, t) in self.iter() {
            d.update(&t.le_bytes());
        }
        d.finish()
    }

    /// Per-tensor digests keyed by name.
    pub fn tensor_digests(&self) -> BTreeMap<String, u64> {
        self.iter()
            .map(|(n, t)| (n.to_string(), fnv1a64(&t.le_bytes())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (name, tensor) in self.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                offset: payload.len() as u64,
            });
            payload.extend_from_slice(&tensor.le_bytes());
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: entries,
        })?;
        let checksum = fnv1a64(&payload);

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(MAGIC)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes())?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            f.write_all(&payload)?;
            f.write_all(&checksum.to_le_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |reason: &str| Error::CheckpointFormat {
            reason: reason.to_string(),
        };
        if bytes.len() < 8 + 4 + 8 + 8 {
            return Err(fail("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(fail("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(fail(&format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20 + header_len;
        if bytes.len() < payload_start + 8 {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        let payload = &bytes[payload_start..bytes.len() - 8];
        let stored =
            u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut ckpt = Checkpoint::empty(header.config);
        let mut expected_offset = 0u64;
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(fail(&format!(
                    "tensor `{}` at offset {}, expected {}",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let n_bytes = entry.shape.iter().product::<usize>() * 4;
            let start = entry.offset as usize;
            if start + n_bytes > payload.len() {
                return Err(fail(&format!("tensor `{}` overruns payload", entry.name)));
            }
            let tensor = Tensor::from_le_bytes(&entry.shape, &payload[start..start + n_bytes])?;
            ckpt.insert(entry.name, tensor)?;
            expected_offset += n_bytes as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(fail("payload length does not match tensor index"));
        }
        ckpt.validate()?;
        Ok(ckpt)
    }
}

/// Per-tensor trainable flags. Tensors absent from the map are frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeMask {
    trainable: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn all_trainable(ckpt: &Checkpoint) -> Self {
        FreezeMask {
            trainable: ckpt
                .canonical_names()
                .into_iter()
                .map(|n| (n, true))
                .collect(),
        }
    }

    pub fn all_frozen(ckpt: &Checkpoint) -> Self {
        FreezeMask {
            trainable: ckpt
                .canonical_names()
                .into_iter()
                .map(|n| (n, false))
                .collect(),
        }
    }

    pub fn from_map(trainable: BTreeMap<String, bool>) -> Self {
        FreezeMask { trainable }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn set(&mut self, name: String, trainable: bool) {
        self.trainable.insert(name, trainable);
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable.values().filter(|&&v| v).count()
    }

    /// Names must exactly cover the checkpoint tensors.
    pub fn validate_against(&self, ckpt: &Checkpoint) -> Result<()> {
        let names = ckpt.canonical_names();
        for n in &names {
            if !self.trainable.contains_key(n) {
                return Err(Error::MaskMismatch {
                    reason: format!("tensor `{n}` missing from mask"),
                });
            }
        }
        if self.trainable.len() != names.len() {
            let set: std::collections::BTreeSet<&String> = names.iter().collect();
            let extra = self
                .trainable
                .keys()
                .find(|k| !set.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::MaskMismatch {
                reason: format!("mask names tensor `{extra}` not in checkpoint"),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, &json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Digests of the frozen tensors only, for conservation checks.
pub fn frozen_digests(ckpt: &Checkpoint, mask: &FreezeMask) -> BTreeMap<String, u64> {
    ckpt.iter()
        .filter(|(n, _)| !mask.is_trainable(n))
        .map(|(n, t)| (n.to_string(), fnv1a64(&t.le_bytes())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 64,
            norm_eps: 1e-5,
            seed: 5,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = init_model(&cfg()).unwrap();
        let dir = std::env::temp_dir().join("layercake-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.payload_digest(), ckpt.payload_digest());
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let ckpt = init_model(&cfg()).unwrap();
        let dir = std::env::temp_dir().join("layercake-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.ckpt");
        ckpt.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::ChecksumMismatch { .. })
                || matches!(err, Error::CheckpointFormat { .. })
                || matches!(err, Error::Json(_)),
            "unexpected error {err}"
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let err = Checkpoint::from_bytes(b"NOTMAGIC________________________").unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn validate_catches_missing_and_extra() {
        let ckpt = init_model(&cfg()).unwrap();
        let mut broken = ckpt.clone();
        broken.tensors.remove("block.1.wq");
        assert!(matches!(
            broken.validate().unwrap_err(),
            Error::MissingTensor { .. }
        ));
        let mut extra = ckpt.clone();
        extra
            .tensors
            .insert("block.9.wq".to_string(), Tensor::zeros(&[16, 16]));
        assert!(matches!(
            extra.validate().unwrap_err(),
            Error::UnexpectedTensor { .. }
        ));
    }

    #[test]
    fn mask_roundtrip_and_validation() {
        let ckpt = init_model(&cfg()).unwrap();
        let mut mask = FreezeMask::all_frozen(&ckpt);
        mask.set("block.0.wq".to_string(), true);
        mask.validate_against(&ckpt).unwrap();
        assert_eq!(mask.n_trainable(), 1);

        let dir = std::env::temp_dir().join("layercake-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("mask.json");
        mask.save(&p).unwrap();
        assert_eq!(FreezeMask::load(&p).unwrap(), mask);

        let mut bad = mask.clone();
        bad.trainable.remove("embed");
        assert!(bad.validate_against(&ckpt).is_err());
    }
}
