//! Checkpoint layout:
//!
//! ```text
//! MAGIC (8 bytes) | version: u32 LE | header_len: u64 LE | header JSON | blobs
//! ```
//!
//! The header is a [`Manifest`]. Blobs are the parameters in manifest order,
//! each a run of little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InsertionPlan, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"PTWMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub position: usize,
    pub block: usize,
    /// Pruned MLP hidden units.
    pub pruned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub omega: InsertionPlan,
    pub training_step: u64,
    /// Total number of `f32` values across all blobs.
    pub param_count: usize,
    pub params: Vec<ManifestParam>,
    #[serde(default)]
    pub masks: Vec<MaskRecord>,
}

impl Model {
    pub fn manifest(&self) -> Manifest {
        let masks = self
            .stacks
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().enumerate().map(move |(k, b)| (i, k, b)))
            .filter_map(|(i, k, b)| {
                b.mlp_mask.as_ref().map(|mask| MaskRecord {
                    position: i,
                    block: k,
                    pruned: mask
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v == 0.0)
                        .map(|(u, _)| u)
                        .collect(),
                })
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            omega: self.plan.clone(),
            training_step: self.training_step,
            param_count: self.param_count(),
            params: self
                .store
                .iter()
                .map(|p| ManifestParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            masks,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let (manifest, blobs) = split_checkpoint(bytes)?;
        let summed: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if summed != manifest.param_count {
            return Err(Error::Checkpoint(format!(
                "manifest param_count {} disagrees with parameter shapes ({summed})",
                manifest.param_count
            )));
        }
        if blobs.len() != 4 * manifest.param_count {
            return Err(Error::Checkpoint(format!(
                "size mismatch: manifest expects {} bytes of weights, found {}",
                4 * manifest.param_count,
                blobs.len()
            )));
        }
        let host = Model::skeleton(manifest.config.clone())?;
        let mut model = if manifest.omega.total() > 0 {
            host.inject(&manifest.omega, super::InitMode::Identity, 0)?
        } else {
            if manifest.omega.len() != manifest.config.layers {
                return Err(Error::PlanMismatch {
                    plan: manifest.omega.len(),
                    layers: manifest.config.layers,
                });
            }
            host
        };
        if model.store.len() != manifest.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this architecture, manifest lists {}",
                model.store.len(),
                manifest.params.len()
            )));
        }
        let mut offset = 0;
        for (id, mp) in manifest.params.iter().enumerate() {
            let p = model.store.get(id);
            if p.name != mp.name || p.value.shape() != mp.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {id} is {}{:?}, manifest says {}{:?}",
                    p.name,
                    p.value.shape(),
                    mp.name,
                    mp.shape
                )));
            }
            let n = p.value.numel();
            let data = blobs[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            model.store.set_value(id, Tensor::new(mp.shape.clone(), data)?)?;
            model.store.get_mut(id).trainable = mp.trainable;
        }
        let hidden = model.config.mlp_width();
        for rec in &manifest.masks {
            let block = model
                .stacks
                .get_mut(rec.position)
                .and_then(|s| s.get_mut(rec.block))
                .ok_or_else(|| Error::Checkpoint(format!("mask for missing block {}.{}", rec.position, rec.block)))?;
            let mut mask = vec![1.0; hidden];
            for &u in &rec.pruned {
                *mask
                    .get_mut(u)
                    .ok_or_else(|| Error::Checkpoint(format!("pruned unit {u} out of range")))? = 0.0;
            }
            block.mlp_mask = Some(mask);
        }
        model.training_step = manifest.training_step;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_bytes(&fs::read(path)?)
    }
}

/// Parses the fixed header and returns the manifest and the weight bytes.
pub fn split_checkpoint(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..header_end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnknownVersion(manifest.format_version));
    }
    Ok((manifest, &bytes[header_end..]))
}
