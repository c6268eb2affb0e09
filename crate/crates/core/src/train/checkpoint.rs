// SPDX-License-Identifier: Apache-2.0

//! Checkpoint directories: `checkpoint.json` (spec, progress, parameter
//! index), `weights.bin` (parameters sorted by name, little-endian `f32`)
//! and optionally `optimizer.bin` (AdamW moments in the same order).

use std::fs;
use std::path::Path;

use kinaema_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig};
use crate::model::{ModelSpec, Network};
use crate::{Error, LoadError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: String,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// First moments of `params[i]` at `first[i]`, second moments at `second[i]`.
    pub first: Vec<TensorEntry>,
    pub second: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u64,
    pub spec: ModelSpec,
    /// Training steps completed.
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub best_metric: Option<f64>,
    pub params: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamSet<f32>,
    pub optimizer: Option<AdamW>,
}

/// What to store besides the weights.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub best_metric: Option<f64>,
}

fn push_tensor(blob: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> TensorEntry {
    let offset = blob.len() as u64;
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let entry = TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        offset,
        bytes: bytes.len() as u64,
        crc32: crc32fast::hash(&bytes),
    };
    blob.extend_from_slice(&bytes);
    entry
}

/// Decodes one tensor from a blob, checking bounds and checksum.
pub fn decode_tensor(entry: &TensorEntry, blob: &[u8], file: &str) -> std::result::Result<Tensor<f32>, LoadError> {
    let what = format!("{file}:{}", entry.name);
    let numel = entry.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = numel.and_then(|n| n.checked_mul(4)).map(|b| b as u64);
    if expected != Some(entry.bytes) || entry.shape.contains(&0) || entry.shape.is_empty() {
        return Err(LoadError::Manifest(format!(
            "{what}: shape {:?} does not match {} bytes",
            entry.shape, entry.bytes
        )));
    }
    let end = entry
        .offset
        .checked_add(entry.bytes)
        .ok_or_else(|| LoadError::Manifest(format!("{what}: offset overflows")))?;
    if end > blob.len() as u64 {
        return Err(LoadError::Truncated {
            what,
            start: entry.offset,
            end,
            available: blob.len() as u64,
        });
    }
    let bytes = &blob[entry.offset as usize..end as usize];
    let computed = crc32fast::hash(bytes);
    if computed != entry.crc32 {
        return Err(LoadError::Checksum {
            what,
            stored: entry.crc32,
            computed,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| LoadError::Manifest(e.to_string()))
}

/// Parses `checkpoint.json`, checking the version before the schema.
pub fn decode_checkpoint_manifest(text: &[u8]) -> std::result::Result<CheckpointManifest, LoadError> {
    let value: serde_json::Value = serde_json::from_slice(text).map_err(|e| LoadError::Manifest(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| LoadError::Manifest("missing integer `format_version`".into()))?;
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(LoadError::Version {
            found,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| LoadError::Manifest(e.to_string()))
}

pub fn save_checkpoint(
    dir: &Path,
    spec: &ModelSpec,
    params: &ParamSet<f32>,
    optimizer: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let order = params.sorted_ids();
    let mut blob = Vec::new();
    let entries = order
        .iter()
        .map(|&id| push_tensor(&mut blob, &params.get(id).name, params.value(id)))
        .collect();
    let opt_meta = optimizer.map(|opt| {
        let mut ob = Vec::new();
        let first = order
            .iter()
            .map(|&id| push_tensor(&mut ob, &params.get(id).name, &opt.m[id.index()]))
            .collect();
        let second = order
            .iter()
            .map(|&id| push_tensor(&mut ob, &params.get(id).name, &opt.v[id.index()]))
            .collect();
        (
            OptimizerMeta {
                kind: "adamw".into(),
                step: opt.step,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
                first,
                second,
            },
            ob,
        )
    });
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: spec.clone(),
        step: meta.step,
        train: meta.train.clone(),
        best_metric: meta.best_metric,
        params: entries,
        optimizer: opt_meta.as_ref().map(|(m, _)| m.clone()),
    };
    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(WEIGHTS_FILE, &blob)?;
    match &opt_meta {
        Some((_, ob)) => write(OPTIMIZER_FILE, ob)?,
        None => {
            let p = dir.join(OPTIMIZER_FILE);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    write(CHECKPOINT_FILE, (text + "\n").as_bytes())
}

/// Loads a checkpoint and verifies that its parameters are exactly those
/// the stored spec builds.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest = decode_checkpoint_manifest(&read(CHECKPOINT_FILE)?)?;
    manifest
        .spec
        .validate()
        .map_err(|e| LoadError::Incompatible(e.to_string()))?;
    let (mut params, _) = Network::build::<f32>(&manifest.spec)?;
    if manifest.params.len() != params.len() {
        return Err(LoadError::Incompatible(format!(
            "checkpoint has {} parameters, spec builds {}",
            manifest.params.len(),
            params.len()
        ))
        .into());
    }
    let blob = read(WEIGHTS_FILE)?;
    for entry in &manifest.params {
        let id = params
            .id(&entry.name)
            .map_err(|_| LoadError::Incompatible(format!("unexpected parameter `{}`", entry.name)))?;
        let t = decode_tensor(entry, &blob, WEIGHTS_FILE)?;
        if t.shape() != params.value(id).shape() {
            return Err(LoadError::Incompatible(format!(
                "parameter `{}` has shape {:?}, spec expects {:?}",
                entry.name,
                t.shape(),
                params.value(id).shape()
            ))
            .into());
        }
        *params.value_mut(id) = t;
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(meta) => {
            let ob = read(OPTIMIZER_FILE)?;
            let mut opt = AdamW::new(&params, meta.beta1, meta.beta2, meta.eps, meta.weight_decay);
            opt.step = meta.step;
            for (entries, slot) in [(&meta.first, 0), (&meta.second, 1)] {
                for entry in entries {
                    let id = params
                        .id(&entry.name)
                        .map_err(|_| LoadError::Incompatible(format!("unexpected moment `{}`", entry.name)))?;
                    let t = decode_tensor(entry, &ob, OPTIMIZER_FILE)?;
                    if t.shape() != params.value(id).shape() {
                        return Err(
                            LoadError::Incompatible(format!("moment `{}` has the wrong shape", entry.name)).into(),
                        );
                    }
                    if slot == 0 {
                        opt.m[id.index()] = t;
                    } else {
                        opt.v[id.index()] = t;
                    }
                }
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}
