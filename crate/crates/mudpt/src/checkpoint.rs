//! Parameter snapshots, content hashing, and JSON checkpoints.
//!
//! A checkpoint is a single JSON document: version, kind, a map from dotted
//! parameter path to {shape, row-major data}, and a SHA-256 content hash over
//! a canonical byte encoding (paths sorted, dimensions and values in
//! little-endian). JSON numbers round-trip `f64` exactly (shortest-repr
//! printing), so saving and loading is lossless at double precision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::DualEncoderModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamRecord {
    pub fn from_tensor(t: &Tensor) -> Self {
        ParamRecord { shape: t.shape.clone(), data: t.data.clone() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.data.clone(), &self.shape)
    }
}

/// On-disk checkpoint document. `kind` distinguishes full-backbone files from
/// prompt/injection files; the latter carry the hash of the backbone they
/// were tuned against.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub version: u32,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_hash: Option<String>,
    pub params: BTreeMap<String, ParamRecord>,
    pub content_hash: String,
}

/// SHA-256 over the canonical encoding of a parameter map: for each path in
/// sorted order — path bytes, NUL, rank and dims as u64 LE, values as f64 LE.
pub fn content_hash(params: &BTreeMap<String, ParamRecord>) -> String {
    let mut hasher = Sha256::new();
    for (path, record) in params {
        hasher.update(path.as_bytes());
        hasher.update([0u8]);
        hasher.update((record.shape.len() as u64).to_le_bytes());
        for &d in &record.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in &record.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Collect a model's frozen parameters into a path-keyed map.
pub fn backbone_params(model: &DualEncoderModel) -> BTreeMap<String, ParamRecord> {
    let mut params = BTreeMap::new();
    model.for_each_param(&mut |path, tensor| {
        params.insert(path, ParamRecord::from_tensor(tensor));
    });
    params
}

/// Full copy of the frozen backbone plus its content hash, for frozenness
/// assertions before and after tuning.
#[derive(Debug, Clone)]
pub struct BackboneSnapshot {
    pub hash: String,
    pub params: BTreeMap<String, ParamRecord>,
}

impl BackboneSnapshot {
    pub fn of(model: &DualEncoderModel) -> Self {
        let params = backbone_params(model);
        BackboneSnapshot { hash: content_hash(&params), params }
    }
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    params: BTreeMap<String, ParamRecord>,
    backbone_hash: Option<String>,
) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        backbone_hash,
        content_hash: content_hash(&params),
        params,
    };
    let json = serde_json::to_string(&file)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let recomputed = content_hash(&file.params);
    if recomputed != file.content_hash {
        return Err(Error::Data(format!(
            "checkpoint content hash mismatch: stored {}, recomputed {recomputed}",
            file.content_hash
        )));
    }
    for (path, record) in &file.params {
        let numel: usize = record.shape.iter().product();
        if record.shape.is_empty() || numel != record.data.len() {
            return Err(Error::Data(format!("checkpoint entry {path} has inconsistent shape")));
        }
        if record.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("checkpoint entry {path} contains non-finite values")));
        }
    }
    Ok(file)
}

/// Write every parameter of `params` into the model, requiring an exact match
/// of paths and shapes in both directions.
pub fn restore_backbone(model: &mut DualEncoderModel, params: &BTreeMap<String, ParamRecord>) -> Result<()> {
    let mut missing = Vec::new();
    let mut result = Ok(());
    let mut used = 0usize;
    model.for_each_param_mut(&mut |path, tensor| {
        if result.is_err() {
            return;
        }
        match params.get(&path) {
            None => missing.push(path),
            Some(record) => {
                if record.shape != tensor.shape {
                    result = Err(Error::shape(
                        format!("checkpoint entry {path}"),
                        format!("{:?}", tensor.shape),
                        format!("{:?}", record.shape),
                    ));
                    return;
                }
                tensor.data.clone_from(&record.data);
                used += 1;
            }
        }
    });
    result?;
    if !missing.is_empty() {
        return Err(Error::Data(format!("checkpoint missing parameters: {}", missing.join(", "))));
    }
    if used != params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters but the model consumed {used}",
            params.len()
        )));
    }
    Ok(())
}
