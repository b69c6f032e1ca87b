//! Checkpoints: a binary tensor blob plus a JSON sidecar at `<blob>.json`
//! holding the config, metadata and the blob's SHA-256.
//!
//! Blob layout (little endian): magic `BONETCKP`, format version `u32`,
//! tensor count `u32`, then per tensor: name length `u32`, UTF-8 name, kind
//! `u8` (0 parameter, 1 buffer, 2 extra), rank `u32`, dims `u64` each, data
//! as `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::BoNetConfig;
use super::network::Model;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"BONETCKP";

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_EXTRA: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics: Value,
    /// Trainer state needed to resume, absent for exported models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<Value>,
}

impl CheckpointMeta {
    pub fn new(epoch: usize, seed: u64) -> Self {
        CheckpointMeta {
            epoch,
            seed,
            metrics: Value::Object(Default::default()),
            train_state: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    config: BoNetConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    checksum: String,
}

pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    /// Named tensors saved alongside the model, such as optimizer moments.
    pub extras: Vec<(String, Tensor)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(entries: &[(&str, u8, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, kind, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(*kind);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, u8, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    let truncated = || "blob is truncated".to_string();
    if r.take(8).ok_or_else(truncated)? != MAGIC {
        return Err("not a checkpoint blob (bad magic)".into());
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported blob version {version}, expected {FORMAT_VERSION}"));
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let kind = r.take(1).ok_or_else(truncated)?[0];
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r
            .take(numel.checked_mul(8).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, kind, Tensor::new(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after the last tensor".into());
    }
    Ok(out)
}

/// Write `model` and `extras` to `path` and the sidecar to `<path>.json`.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta, extras: &[(String, Tensor)]) -> Result<()> {
    let store = &model.params;
    let mut entries: Vec<(&str, u8, &Tensor)> = store
        .ids()
        .map(|id| {
            let kind = if store.is_trainable(id) { KIND_PARAM } else { KIND_BUFFER };
            (store.name(id), kind, store.get(id))
        })
        .collect();
    entries.extend(extras.iter().map(|(n, t)| (n.as_str(), KIND_EXTRA, t)));
    let blob = encode(&entries);
    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        config: model.config().clone(),
        meta: meta.clone(),
        checksum: sha256_hex(&blob),
    };
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(path, &blob)?;
    write_atomic(&sidecar_path(path), &json)
}

fn read_verified(path: &Path) -> Result<(Sidecar, Vec<(String, u8, Tensor)>)> {
    let err = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let side_path = sidecar_path(path);
    let side_bytes = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let raw: Value = serde_json::from_slice(&side_bytes).map_err(|e| err(format!("sidecar is not valid JSON: {e}")))?;
    match raw.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(err(format!("unsupported checkpoint version {v}, expected {FORMAT_VERSION}"))),
        None => return Err(err("sidecar has no version".into())),
    }
    let sidecar: Sidecar = serde_json::from_value(raw).map_err(|e| err(format!("malformed sidecar: {e}")))?;
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = sha256_hex(&blob);
    if actual != sidecar.checksum {
        return Err(err(format!(
            "checksum mismatch (expected {}, got {actual}); file is corrupted or truncated",
            sidecar.checksum
        )));
    }
    let tensors = decode(&blob).map_err(err)?;
    Ok((sidecar, tensors))
}

fn assemble(path: &Path, cfg: &BoNetConfig, sidecar: Sidecar, tensors: Vec<(String, u8, Tensor)>) -> Result<Checkpoint> {
    let err = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut model = Model::empty(cfg)?;
    let mut extras = Vec::new();
    let mut seen = vec![false; model.params.len()];
    for (name, kind, t) in tensors {
        if kind == KIND_EXTRA {
            extras.push((name, t));
            continue;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| err(format!("tensor {name} does not exist in the configured model")))?;
        let want = model.params.get(id).shape().to_vec();
        if t.shape() != want.as_slice() {
            return Err(err(format!(
                "tensor {name} has shape {:?} but the configured model expects {want:?}",
                t.shape()
            )));
        }
        *model.params.get_mut(id) = t;
        seen[id.index()] = true;
    }
    if let Some(id) = model.params.ids().find(|id| !seen[id.index()]) {
        return Err(err(format!("tensor {} is missing from the checkpoint", model.params.name(id))));
    }
    Ok(Checkpoint {
        model,
        meta: sidecar.meta,
        extras,
    })
}

/// Load a checkpoint using the config recorded in its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (sidecar, tensors) = read_verified(path)?;
    let cfg = sidecar.config.clone();
    assemble(path, &cfg, sidecar, tensors)
}

/// Load a checkpoint into a model built from `cfg`; any tensor whose name or
/// shape disagrees is reported.
pub fn load_checkpoint_as(path: &Path, cfg: &BoNetConfig) -> Result<Checkpoint> {
    let (sidecar, tensors) = read_verified(path)?;
    assemble(path, cfg, sidecar, tensors)
}
