//! Checkpoint files: a JSON header (`<stem>.json`) describing every tensor
//! plus a flat little-endian f64 payload (`<stem>.bin`).
//!
//! The payload is the concatenation of all tensors in header order. Saving
//! and loading an `f64` parameter set round-trips bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mathkernel::Params;
use crate::scalar::Real;

pub const FORMAT: &str = "latent-its-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    /// Which parameter set this is (`backbone`, `sampler`, ...).
    pub kind: String,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Hex SHA-256 of the binary payload.
    pub payload_sha256: String,
    /// Module-specific header fields.
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl CheckpointHeader {
    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Checkpoint(format!("header field '{key}' missing or not a number")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("header field '{key}' missing or not an integer")))
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        self.meta
            .get(key)
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::Checkpoint(format!("header field '{key}' missing or not a bool")))
    }
}

pub fn header_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "json")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    with_suffix(stem, "bin")
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn exists(stem: &Path) -> bool {
    header_path(stem).exists() || payload_path(stem).exists()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the little-endian f64 encoding of every parameter.
pub fn params_checksum<T: Real>(params: &impl Params<T>) -> String {
    sha256_hex(&encode_payload(params))
}

fn encode_payload<T: Real>(params: &impl Params<T>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.num_params() * 8);
    for t in params.tensors() {
        for &v in t.data {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    bytes
}

pub fn build_header<T: Real>(
    kind: &str,
    seed: u64,
    params: &impl Params<T>,
    meta: serde_json::Map<String, serde_json::Value>,
) -> (CheckpointHeader, Vec<u8>) {
    let mut offset = 0;
    let tensors = params
        .tensors()
        .into_iter()
        .map(|t| {
            let e = TensorEntry { name: t.name, shape: t.shape, offset, len: t.data.len() };
            offset += e.len;
            e
        })
        .collect();
    let payload = encode_payload(params);
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        seed,
        tensors,
        payload_sha256: sha256_hex(&payload),
        meta,
    };
    (header, payload)
}

pub fn save<T: Real>(
    stem: &Path,
    kind: &str,
    seed: u64,
    params: &impl Params<T>,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<CheckpointHeader> {
    let (header, payload) = build_header(kind, seed, params, meta);
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(payload_path(stem), &payload)?;
    fs::write(header_path(stem), serde_json::to_string_pretty(&header)? + "\n")?;
    Ok(header)
}

pub fn read_header(stem: &Path) -> Result<CheckpointHeader> {
    let hp = header_path(stem);
    if !hp.exists() {
        return Err(Error::NotFound(hp));
    }
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(&hp)?)?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format '{}'", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    Ok(header)
}

/// Reads a checkpoint and returns its header and flat values.
pub fn load_raw(stem: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let header = read_header(stem)?;
    let pp = payload_path(stem);
    if !pp.exists() {
        return Err(Error::NotFound(pp));
    }
    let bytes = fs::read(&pp)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    if sha256_hex(&bytes) != header.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let expected: usize = header.tensors.iter().map(|t| t.len).sum();
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload has {} values, header describes {}",
            values.len(),
            expected
        )));
    }
    Ok((header, values))
}

/// Fills `params` (whose layout must match the header) from a checkpoint.
pub fn load_into<T: Real>(stem: &Path, kind: &str, params: &mut impl Params<T>) -> Result<CheckpointHeader> {
    let (header, values) = load_raw(stem)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a '{kind}' checkpoint, found '{}'", header.kind)));
    }
    let layout: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    let stored: Vec<(String, Vec<usize>)> =
        header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if layout != stored {
        return Err(Error::Checkpoint("tensor layout does not match the target parameters".into()));
    }
    let flat: Vec<T> = values.into_iter().map(T::lit).collect();
    params.assign_flat(&flat)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathkernel::TwoLayerNet;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut net = TwoLayerNet::<f64>::xavier(5, 7, 3, &mut rng);
        net.b2[1] = std::f64::consts::PI * 1e-300;
        let mut meta = serde_json::Map::new();
        meta.insert("D".into(), 5.into());
        save(&stem, "test", 11, &net, meta).unwrap();
        let mut back = TwoLayerNet::<f64>::zeros(5, 7, 3);
        let header = load_into(&stem, "test", &mut back).unwrap();
        assert_eq!(header.meta_u64("D").unwrap(), 5);
        assert_eq!(header.seed, 11);
        let a: Vec<u64> = net.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_layout_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        let net = TwoLayerNet::<f64>::zeros(2, 3, 2);
        save(&stem, "test", 0, &net, Default::default()).unwrap();
        let mut wrong = TwoLayerNet::<f64>::zeros(3, 3, 2);
        assert!(matches!(load_into(&stem, "test", &mut wrong), Err(Error::Checkpoint(_))));
        let mut right = net.clone();
        assert!(matches!(load_into(&stem, "other", &mut right), Err(Error::Checkpoint(_))));
        let mut bytes = fs::read(payload_path(&stem)).unwrap();
        bytes[0] ^= 1;
        fs::write(payload_path(&stem), bytes).unwrap();
        assert!(matches!(load_into(&stem, "test", &mut right), Err(Error::Checkpoint(_))));
        assert!(matches!(read_header(&dir.path().join("missing")), Err(Error::NotFound(_))));
    }
}
