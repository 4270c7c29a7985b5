//! Bit-exact model checkpoints.
//!
//! Layout: the ASCII magic `DIMPLECKPT`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest (model config plus
//! named tensors with shapes and byte offsets relative to the blob section),
//! then the concatenated little-endian `f64` blobs in manifest order.
//! Save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::encoder::{EncoderConfig, PromptMode};
use crate::error::{Error, Result};
use crate::model::{DimpleModel, Objective};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"DIMPLECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    enc_cfg: EncoderConfig,
    mode: PromptMode,
    objective: Objective,
    task: TaskSpec,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &DimpleModel) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (name, p) in model.store.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: p.shape.clone(), offset });
        offset += (p.numel() * 8) as u64;
    }
    let manifest = Manifest {
        enc_cfg: model.enc_cfg.clone(),
        mode: model.mode,
        objective: model.objective,
        task: model.task.clone(),
        seed: model.seed,
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::CheckpointParse(format!("manifest serialization: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for (_, p) in model.store.iter() {
        for v in &p.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<DimpleModel> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < CHECKPOINT_MAGIC.len() + 12 {
        return Err(Error::CheckpointTruncated(format!("file is only {} bytes", raw.len())));
    }
    if &raw[..10] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointParse("bad magic; not a checkpoint file".to_string()));
    }
    let version = u32::from_le_bytes(raw[10..14].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let manifest_len = u64::from_le_bytes(raw[14..22].try_into().unwrap()) as usize;
    let blob_start = 22 + manifest_len;
    if raw.len() < blob_start {
        return Err(Error::CheckpointTruncated(format!(
            "manifest claims {manifest_len} bytes but file ends at {}",
            raw.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&raw[22..blob_start])
        .map_err(|e| Error::CheckpointParse(format!("manifest parse: {e}")))?;
    let blobs = &raw[blob_start..];

    let mut model = DimpleModel::new(
        manifest.enc_cfg.clone(),
        manifest.mode,
        manifest.objective,
        &manifest.task,
        manifest.seed,
    )?;
    let mut seen = 0usize;
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if blobs.len() < end {
            return Err(Error::CheckpointTruncated(format!(
                "tensor `{}` needs bytes [{start}, {end}) but blob section has {}",
                entry.name,
                blobs.len()
            )));
        }
        let param = model.store.get_mut(&entry.name).ok_or_else(|| {
            Error::CheckpointShape(format!("checkpoint tensor `{}` is not a model parameter", entry.name))
        })?;
        if param.shape != entry.shape {
            return Err(Error::CheckpointShape(format!(
                "tensor `{}`: checkpoint shape {:?} vs model shape {:?}",
                entry.name, entry.shape, param.shape
            )));
        }
        for (i, v) in param.data.iter_mut().enumerate() {
            *v = f64::from_le_bytes(blobs[start + i * 8..start + i * 8 + 8].try_into().unwrap());
        }
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(Error::CheckpointShape(format!(
            "checkpoint carries {seen} tensors but the model has {}",
            model.store.len()
        )));
    }
    Ok(model)
}
