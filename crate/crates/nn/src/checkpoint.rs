//! Checkpoint container: `PASYN-CKPT-1` magic, a JSON architecture
//! description with a parameter directory, then named little-endian f32
//! blobs in directory order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::Param;
use crate::tensor::Scalar;

pub const MAGIC: &[u8] = b"PASYN-CKPT-1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// Serialize a model's architecture JSON plus its parameter walk.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    arch: &serde_json::Value,
    params: &[Param<'_, T>],
) -> Result<()> {
    let header = CheckpointHeader {
        arch: arch.clone(),
        params: params
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), shape: p.shape.clone() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| NnError::io(parent, e))?;
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| NnError::io(path, e))?;
    let io = |e| NnError::io(path, e);
    file.write_all(MAGIC).map_err(io)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(io)?;
    file.write_all(&header_json).map_err(io)?;
    for p in params {
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.iter() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        file.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

/// Raw checkpoint contents: the architecture JSON and each named blob.
pub struct LoadedCheckpoint {
    pub arch: serde_json::Value,
    pub blobs: Vec<(ParamEntry, Vec<f32>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| NnError::io(path, e))?;
    let io = |e| NnError::io(path, e);
    let mut magic = vec![0u8; MAGIC.len()];
    file.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "{}: bad magic (not a PASYN-CKPT-1 file)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;

    let mut blobs = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        file.read_exact(&mut bytes).map_err(|_| {
            NnError::Checkpoint(format!(
                "{}: truncated blob for parameter '{}'",
                path.display(),
                entry.name
            ))
        })?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blobs.push((entry, values));
    }
    Ok(LoadedCheckpoint { arch: header.arch, blobs })
}

/// Copy loaded blobs into a model's parameter walk, by position, with name
/// and shape verification.
pub fn apply_blobs<T: Scalar>(loaded: &LoadedCheckpoint, params: &mut [Param<'_, T>]) -> Result<()> {
    if loaded.blobs.len() != params.len() {
        return Err(NnError::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {}, model has {}",
            loaded.blobs.len(),
            params.len()
        )));
    }
    for ((entry, blob), param) in loaded.blobs.iter().zip(params.iter_mut()) {
        if entry.name != param.name || entry.shape != param.shape {
            return Err(NnError::Checkpoint(format!(
                "parameter mismatch: checkpoint '{}' {:?} vs model '{}' {:?}",
                entry.name, entry.shape, param.name, param.shape
            )));
        }
        for (dst, &src) in param.value.iter_mut().zip(blob) {
            *dst = T::from_f64(src as f64);
        }
    }
    Ok(())
}
