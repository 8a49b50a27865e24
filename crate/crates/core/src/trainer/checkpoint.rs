//! Single-file checkpoints: weight blobs plus one JSON metadata record.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ErasureConfig;
use crate::error::{Error, Result};
use crate::nn::{hash_tensors, load_tensors, save_tensors};
use crate::rng::RngState;

pub const CHECKPOINT_FORMAT: u32 = 1;
const META_KEY: &str = "eraser";
const DENOISER: &str = "denoiser.";
const FUSION: &str = "fusion.";
const ADAM: &str = "adam.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: ErasureConfig,
    pub config_hash: String,
    pub step: usize,
    pub rng_state: RngState,
    /// Adam steps taken in the current stage.
    pub optimizer_step: u64,
    pub backend: String,
    /// Hash of the backend's pretrained denoiser.
    pub base_hash: String,
    /// Hash of the denoiser weights the stage started from. Differs from
    /// `base_hash` for later stages of a chain.
    pub start_hash: String,
    /// Concepts erased by earlier chain stages, oldest first.
    pub erased_before: Vec<String>,
}

/// Trained state after some number of steps.
///
/// `denoiser` holds only the parameters that may differ from the pretrained
/// weights; everything else is recovered from the backend and checked via
/// `base_hash`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub denoiser: BTreeMap<String, Tensor>,
    pub fusion: BTreeMap<String, Tensor>,
    /// Adam moments keyed `m.<group>.<name>` / `v.<group>.<name>`.
    pub optimizer: BTreeMap<String, Tensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn step(&self) -> usize {
        self.meta.step
    }

    pub fn config(&self) -> &ErasureConfig {
        &self.meta.config
    }

    fn all_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (prefix, group) in [
            (DENOISER, &self.denoiser),
            (FUSION, &self.fusion),
            (ADAM, &self.optimizer),
        ] {
            for (k, t) in group {
                out.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        out
    }

    /// Hash over every stored tensor and the metadata record.
    pub fn content_hash(&self) -> Result<String> {
        let tensors = self.all_tensors();
        let weights = hash_tensors(tensors.iter().map(|(k, v)| (k.as_str(), v)))?;
        let mut hasher = Sha256::new();
        hasher.update(weights.as_bytes());
        hasher.update(serde_json::to_vec(&self.meta)?);
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut meta = HashMap::new();
        meta.insert(META_KEY.to_string(), serde_json::to_string(&self.meta)?);
        let tmp = path.with_extension("partial");
        save_tensors(&self.all_tensors(), Some(meta), &tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        let loaded = load_tensors(path, dtype, device)?;
        let raw = loaded
            .metadata
            .get(META_KEY)
            .ok_or_else(|| Error::Load(format!("{} has no checkpoint metadata", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Load(format!(
                "unsupported checkpoint format {}",
                meta.format
            )));
        }
        let mut ckpt = Checkpoint {
            denoiser: BTreeMap::new(),
            fusion: BTreeMap::new(),
            optimizer: BTreeMap::new(),
            meta,
        };
        for (k, t) in loaded.tensors {
            if let Some(name) = k.strip_prefix(DENOISER) {
                ckpt.denoiser.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix(FUSION) {
                ckpt.fusion.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix(ADAM) {
                ckpt.optimizer.insert(name.to_string(), t);
            } else {
                return Err(Error::Load(format!("unexpected tensor {k} in checkpoint")));
            }
        }
        Ok(ckpt)
    }
}
