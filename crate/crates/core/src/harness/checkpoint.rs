//! Binary checkpoint format.
//!
//! ```text
//! "SHL1\n"            5 bytes magic
//! 0x01                version
//! u32 LE              header length in bytes
//! header              canonical JSON: spec, tensor table, payload hash, metadata
//! payload             every tensor in layout order, f64 little-endian
//! ```
//!
//! The content hash is SHA-256 over the payload bytes only, so metadata never
//! changes a checkpoint's identity.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SHL1\n";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: version {found} not supported (expected {VERSION})")]
    VersionMismatch { found: u8 },
    #[error("checkpoint: truncated {section}")]
    Truncated { section: &'static str },
    #[error("checkpoint: payload hash mismatch (header {expected}, payload {actual})")]
    HashMismatch { expected: String, actual: String },
    #[error("checkpoint: malformed header: {0}")]
    MalformedHeader(String),
    #[error("checkpoint: {0} unexpected bytes after payload")]
    TrailingBytes(usize),
}

impl CheckpointError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::VersionMismatch { .. } => 11,
            CheckpointError::Truncated { .. } => 12,
            CheckpointError::HashMismatch { .. } => 13,
            CheckpointError::MalformedHeader(_) => 14,
            CheckpointError::TrailingBytes(_) => 15,
        }
    }
}

/// Free-form provenance stored in the header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Operation that produced the checkpoint (`pretrain`, `probe`, `member`, `average`, ...).
    pub op: String,
    /// Hash of the shared initialization this model descends from.
    pub init_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of the canonical JSON of the hyperparameters, if any.
    pub hyperparams_digest: Option<String>,
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(op: impl Into<String>) -> Self {
        Self {
            op: op.into(),
            ..Self::default()
        }
    }

    pub fn with_init_hash(mut self, hash: impl Into<String>) -> Self {
        self.init_hash = Some(hash.into());
        self
    }

    pub fn with_seed(mut self, label: impl Into<String>, seed: u64) -> Self {
        self.seeds.insert(label.into(), seed);
        self
    }

    pub fn with_hyperparams<T: Serialize>(mut self, hp: &T) -> Result<Self> {
        let json = serde_json::to_vec(hp)?;
        self.hyperparams_digest = Some(hex::encode(Sha256::digest(&json)));
        Ok(self)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
    meta: CheckpointMeta,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: CheckpointMeta,
    /// Hex SHA-256 of the payload.
    pub hash: String,
}

impl Checkpoint {
    /// Content-addressed file name: first 16 hex chars of the hash.
    pub fn file_name(&self) -> String {
        file_name_for(&self.hash)
    }
}

pub fn file_name_for(hash: &str) -> String {
    format!("{}.ckpt", &hash[..16])
}

fn payload_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_params() * 8);
    for (_, t) in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Content hash of a parameter set, as stored in its checkpoint.
pub fn payload_hash(params: &ParamSet) -> String {
    hex::encode(Sha256::digest(payload_bytes(params)))
}

pub fn encode(params: &ParamSet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let payload = payload_bytes(params);
    let header = Header {
        spec: params.spec().clone(),
        tensors: params
            .tensors()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let len = u32::try_from(header.len()).map_err(|_| Error::InvalidArgument("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 5 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let rest = &bytes[MAGIC.len()..];
    let (&version, rest) = rest
        .split_first()
        .ok_or(CheckpointError::Truncated { section: "version" })?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version }.into());
    }
    if rest.len() < 4 {
        return Err(CheckpointError::Truncated { section: "header length" }.into());
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(CheckpointError::Truncated { section: "header" }.into());
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let payload = &rest[header_len..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if payload.len() < expected {
        return Err(CheckpointError::Truncated { section: "tensor payload" }.into());
    }
    if payload.len() > expected {
        return Err(CheckpointError::TrailingBytes(payload.len() - expected).into());
    }
    let actual = hex::encode(Sha256::digest(payload));
    if actual != header.payload_sha256 {
        return Err(CheckpointError::HashMismatch {
            expected: header.payload_sha256,
            actual,
        }
        .into());
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
        tensors.push((entry.name, t));
    }
    let params = ParamSet::from_tensors(header.spec, tensors)
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    Ok(Checkpoint {
        params,
        meta: header.meta,
        hash: actual,
    })
}

/// Writes bytes to a sibling temp file, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves to an explicit path; returns the content hash.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<String> {
    write_atomic(path, &encode(params, meta)?)?;
    Ok(payload_hash(params))
}

/// Saves under `dir` with a content-addressed name; returns `(path, hash)`.
pub fn save_in_dir(dir: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<(PathBuf, String)> {
    let hash = payload_hash(params);
    let path = dir.join(file_name_for(&hash));
    save_checkpoint(&path, params, meta)?;
    Ok((path, hash))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Loads only the tensors.
pub fn load_params(path: &Path) -> Result<ParamSet> {
    Ok(load_checkpoint(path)?.params)
}

/// Parses a spec's JSON form, as stored in checkpoint headers.
pub fn spec_from_json(s: &str) -> Result<ModelSpec> {
    Ok(serde_json::from_str(s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init;

    fn sample() -> (ParamSet, CheckpointMeta) {
        let p = init(&ModelSpec::mlp(3, vec![4], 2), 5).unwrap();
        let meta = CheckpointMeta::new("test").with_seed("init", 5).with_init_hash("abc");
        (p, meta)
    }

    fn err_of(bytes: &[u8]) -> CheckpointError {
        match decode(bytes).unwrap_err() {
            Error::Checkpoint(e) => e,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (p, meta) = sample();
        let a = encode(&p, &meta).unwrap();
        let back = decode(&a).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.meta, meta);
        assert_eq!(encode(&back.params, &back.meta).unwrap(), a);
    }

    #[test]
    fn failure_kinds_are_distinct() {
        let (p, meta) = sample();
        let good = encode(&p, &meta).unwrap();
        assert_eq!(err_of(&[]), CheckpointError::BadMagic);
        let mut v = good.clone();
        v[5] = 2;
        assert_eq!(err_of(&v), CheckpointError::VersionMismatch { found: 2 });
        assert!(matches!(err_of(&good[..good.len() - 3]), CheckpointError::Truncated { .. }));
        let mut v = good.clone();
        let last = v.len() - 1;
        v[last] ^= 1;
        assert!(matches!(err_of(&v), CheckpointError::HashMismatch { .. }));
        let mut v = good.clone();
        v[10] = b'!';
        assert!(matches!(err_of(&v), CheckpointError::MalformedHeader(_)));
        let mut v = good;
        v.push(0);
        assert_eq!(err_of(&v), CheckpointError::TrailingBytes(1));
    }

    #[test]
    fn metadata_does_not_change_identity() {
        let (p, meta) = sample();
        let a = decode(&encode(&p, &meta).unwrap()).unwrap();
        let b = decode(&encode(&p, &CheckpointMeta::new("other")).unwrap()).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.hash, payload_hash(&p));
    }

    #[test]
    fn atomic_save_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let (p, meta) = sample();
        let (path, hash) = save_in_dir(dir.path(), &p, &meta).unwrap();
        assert_eq!(path.file_name().unwrap().to_string_lossy(), file_name_for(&hash));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(load_params(&path).unwrap(), p);
    }
}
