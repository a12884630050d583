//! Checkpoint serialization: one JSON document holding named tensors.

use super::Param;
use crate::error::{GttaError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn from_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Self {
        let tensors = params
            .into_iter()
            .map(|p| {
                (
                    p.name.clone(),
                    TensorEntry { shape: p.shape.clone(), values: p.values.clone() },
                )
            })
            .collect();
        Self { format_version: CHECKPOINT_VERSION, tensors }
    }

    /// Deterministic content digest (FNV-1a over the serialized JSON).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        format!("{:016x}", fnv1a(&bytes))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_checkpoint<'a>(
    path: &Path,
    params: impl IntoIterator<Item = &'a Param>,
) -> Result<()> {
    let ckpt = Checkpoint::from_params(params);
    let json = serde_json::to_string_pretty(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(GttaError::VersionMismatch(ckpt.format_version));
    }
    Ok(ckpt)
}

/// Copy checkpoint tensors into matching parameters by name. Every parameter must
/// be present with an identical shape.
pub fn load_into_params<'a>(
    ckpt: &Checkpoint,
    params: impl IntoIterator<Item = &'a mut Param>,
) -> Result<()> {
    for p in params {
        let entry = ckpt.tensors.get(&p.name).ok_or_else(|| {
            GttaError::ConfigParse(format!("checkpoint is missing tensor {}", p.name))
        })?;
        if entry.shape != p.shape {
            return Err(GttaError::ConfigParse(format!(
                "checkpoint tensor {} has shape {:?}, expected {:?}",
                p.name, entry.shape, p.shape
            )));
        }
        p.values = entry.values.clone();
        p.grad = None;
    }
    Ok(())
}
