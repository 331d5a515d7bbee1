//! Checkpoint file: a human-readable JSON manifest followed by the raw
//! little-endian value payload.
//!
//! Layout: 8-byte magic `HFCKPT01`, u32 LE manifest length, manifest
//! JSON (UTF-8), then the payload with each tensor at its
//! manifest-declared byte offset. Round trips are bit-exact at both
//! precisions; the manifest declares which one the payload carries.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use helio_tensor::{Scalar, Tensor};

use crate::error::{CoreError, Result};
use crate::model::{param_specs, ModelParams, ParamEntry, ParamGroup, SunsetConfig};

const MAGIC: &[u8; 8] = b"HFCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    /// "f32" or "f64".
    pub precision: String,
    /// Seed the parameters were created from.
    pub seed: u64,
    pub config: SunsetConfig,
    pub params: Vec<ParamRecord>,
    pub payload_bytes: u64,
}

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    config: &SunsetConfig,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut records = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, entry) in params.iter() {
        records.push(ParamRecord {
            name: name.clone(),
            shape: entry.tensor.shape().to_vec(),
            group: entry.group,
            trainable: entry.trainable,
            offset: payload.len() as u64,
            len: entry.tensor.numel() as u64,
        });
        for v in entry.tensor.data() {
            v.write_le(&mut payload);
        }
    }
    let manifest = CheckpointManifest {
        format: 1,
        precision: T::NAME.to_string(),
        seed,
        config: config.clone(),
        params: records,
        payload_bytes: payload.len() as u64,
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| CoreError::Checkpoint(format!("manifest encode: {e}")))?;

    let mut file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| CoreError::io(path, e))?;
    file.write_all(&(manifest_json.len() as u32).to_le_bytes()).map_err(|e| CoreError::io(path, e))?;
    file.write_all(&manifest_json).map_err(|e| CoreError::io(path, e))?;
    file.write_all(&payload).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, CheckpointManifest)> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| CoreError::io(path, e))?;
    if raw.len() < 12 || &raw[..8] != MAGIC {
        return Err(CoreError::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mlen = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
    if raw.len() < 12 + mlen {
        return Err(CoreError::Checkpoint(format!("{}: truncated manifest", path.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&raw[12..12 + mlen])
        .map_err(|e| CoreError::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.precision != T::NAME {
        return Err(CoreError::Checkpoint(format!(
            "{}: payload is {}, loader instantiated at {}",
            path.display(),
            manifest.precision,
            T::NAME
        )));
    }
    let payload = &raw[12 + mlen..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CoreError::Checkpoint(format!(
            "{}: payload is {} bytes, manifest declares {}",
            path.display(),
            payload.len(),
            manifest.payload_bytes
        )));
    }

    let mut params = ModelParams::default();
    for rec in &manifest.params {
        let numel: usize = rec.shape.iter().product();
        if numel as u64 != rec.len {
            return Err(CoreError::Checkpoint(format!(
                "parameter '{}': shape {:?} does not describe {} elements",
                rec.name, rec.shape, rec.len
            )));
        }
        let start = rec.offset as usize;
        let bytes = numel * T::BYTES;
        if start + bytes > payload.len() {
            return Err(CoreError::Checkpoint(format!(
                "parameter '{}': payload slice {}..{} out of bounds",
                rec.name,
                start,
                start + bytes
            )));
        }
        let data: Vec<T> = payload[start..start + bytes].chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(rec.shape.clone(), data)
            .map_err(|e| CoreError::Checkpoint(format!("parameter '{}': {e}", rec.name)))?;
        params.insert(&rec.name, ParamEntry { tensor, group: rec.group, trainable: rec.trainable });
    }
    Ok((params, manifest))
}

/// Checks a loaded parameter set against the expected architecture,
/// reporting the first offending name.
pub fn verify_against_config<T: Scalar>(params: &ModelParams<T>, config: &SunsetConfig) -> Result<()> {
    let specs = param_specs(config)?;
    for spec in &specs {
        match params.get(&spec.name) {
            None => {
                return Err(CoreError::Checkpoint(format!("parameter '{}' missing from checkpoint", spec.name)))
            }
            Some(entry) => {
                if entry.tensor.shape() != spec.shape.as_slice() {
                    return Err(CoreError::Checkpoint(format!(
                        "parameter '{}': shape {:?} does not match expected {:?}",
                        spec.name,
                        entry.tensor.shape(),
                        spec.shape
                    )));
                }
                if entry.group != spec.group {
                    return Err(CoreError::Checkpoint(format!(
                        "parameter '{}': group {} does not match expected {}",
                        spec.name, entry.group, spec.group
                    )));
                }
            }
        }
    }
    if params.len() != specs.len() {
        let expected: std::collections::BTreeSet<_> = specs.iter().map(|s| s.name.clone()).collect();
        let extra = params.names().into_iter().find(|n| !expected.contains(n)).unwrap_or_default();
        return Err(CoreError::Checkpoint(format!("unexpected parameter '{extra}' in checkpoint")));
    }
    Ok(())
}
