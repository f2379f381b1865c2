//! Single-file checkpoint archive.
//!
//! Layout: the magic `MAGMSCK\0`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, the tensor payload
//! (32-bit little-endian floats, C order, in header order) and a trailing
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MagError, Result};
use crate::types::ExperimentConfig;

pub const MAGIC: &[u8; 8] = b"MAGMSCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Arm tag and any arm parameters.
    pub arm: serde_json::Value,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
    pub optimizer_step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arm: serde_json::Value,
    pub config: ExperimentConfig,
    pub iteration: u64,
    pub seed: u64,
    pub optimizer_step: u64,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            arm: self.arm.clone(),
            config: self.config.clone(),
            config_hash: self.config.hash(),
            iteration: self.iteration,
            seed: self.seed,
            optimizer_step: self.optimizer_step,
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses an archive; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| MagError::load(origin, reason);
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint archive".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch (archive is corrupt)".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fail("header length exceeds file".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| fail(format!("bad header: {e}")))?;
        if header.format_version != version {
            return Err(fail("header and preamble disagree on version".into()));
        }
        header
            .config
            .validate()
            .map_err(|e| fail(format!("invalid config: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(fail("config hash does not match stored config".into()));
        }
        let payload = &body[header_end..];
        let total: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        if payload.len() != total * 4 {
            return Err(fail(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                total * 4
            )));
        }
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 4;
            let chunk = payload
                .get(start..start + n * 4)
                .ok_or_else(|| fail(format!("tensor {} out of bounds", entry.name)))?;
            let data: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).expect("length checked");
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(fail(format!("duplicate tensor {}", entry.name)));
            }
        }
        Ok(Self {
            arm: header.arm,
            config: header.config,
            iteration: header.iteration,
            seed: header.seed,
            optimizer_step: header.optimizer_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MagError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MagError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and additionally requires the stored config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &ExperimentConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.hash() != expected.hash() {
            return Err(MagError::load(
                path,
                format!(
                    "checkpoint config {} differs from expected config {}",
                    ck.config.hash(),
                    expected.hash()
                ),
            ));
        }
        Ok(ck)
    }

    /// Hex SHA-256 of the serialised archive.
    pub fn identity(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors.get(name).ok_or_else(|| MagError::Lookup {
            kind: "tensor",
            name: name.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            ArrayD::from_shape_vec(
                IxDyn(&[2, 3]),
                vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0],
            )
            .unwrap(),
        );
        tensors.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[4]), 0.25f32));
        Checkpoint {
            arm: serde_json::json!({"kind": "magms"}),
            config: ExperimentConfig::default(),
            iteration: 12,
            seed: 3,
            optimizer_step: 12,
            tensors,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        let err = Checkpoint::from_bytes(&flipped, Path::new("ck.bin"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("ck.bin") && err.contains("corrupt"), "{err}");

        let mut old = bytes[..bytes.len() - 32].to_vec();
        old[8] = 9;
        let digest = Sha256::digest(&old);
        old.extend_from_slice(&digest);
        let err = Checkpoint::from_bytes(&old, Path::new("ck.bin"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("version"), "{err}");

        assert!(Checkpoint::from_bytes(b"short", Path::new("x")).is_err());
    }

    #[test]
    fn expected_config_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        let mut other = ExperimentConfig::default();
        other.lambda_kl = 0.0;
        assert!(Checkpoint::load_expecting(&path, &ExperimentConfig::default()).is_ok());
        assert!(matches!(
            Checkpoint::load_expecting(&path, &other),
            Err(MagError::Load { .. })
        ));
    }
}
