use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::model::{Dmmn, DmmnConfig};
use crate::error::{Error, Result};
use crate::nn::{load_tensors, save_tensors, tensor_map_hash};
use crate::raster;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Mean training loss over the epoch; absent for the initial parameters.
    pub train_loss: Option<f64>,
    /// Binary cancer IOU on the selection set; absent when undefined.
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// `M{iteration}`.
    pub tag: String,
    pub iteration: u32,
    pub model: DmmnConfig,
    /// SHA-256 of the resolved training configuration.
    pub config_hash: String,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub manifest_version: Option<u64>,
    pub val_iou: Option<f64>,
    /// Which set `val_iou` was measured on (`val` or `train`).
    pub selection_set: String,
    pub selected_epoch: u32,
    pub history: Vec<EpochRecord>,
    pub params_hash: String,
    /// Parameters the run started from.
    pub init_hash: String,
    /// The checkpoint this one succeeds in a model lineage.
    pub parent_hash: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// Trained segmentation parameters with their optimizer state and metadata.
#[derive(Debug, Clone)]
pub struct SegCheckpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

impl SegCheckpoint {
    pub fn hash(&self) -> &str {
        &self.meta.params_hash
    }

    /// Network with this checkpoint's parameters, in `dtype`.
    pub fn instantiate(&self, dtype: DType) -> Result<Dmmn> {
        let net = Dmmn::new(&self.meta.model, dtype, 0)?;
        net.store().restore(&self.params)?;
        Ok(net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if dir.join("meta.json").exists() {
            return Err(Error::Conflict(format!("checkpoint {} already exists", dir.display())));
        }
        let staging = dir.with_extension("partial");
        if staging.exists() {
            std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        save_tensors(&staging.join("params.safetensors"), &self.params)?;
        save_tensors(&staging.join("optimizer.safetensors"), &self.optimizer)?;
        raster::write_json(&staging.join("meta.json"), &self.meta)?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Err(Error::NotFound(format!("checkpoint {}", dir.display())));
        }
        let meta: CheckpointMeta = raster::read_json(&meta_path)?;
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "checkpoint schema {} unsupported",
                meta.schema_version
            )));
        }
        let params = load_tensors(&dir.join("params.safetensors"))?;
        let optimizer = match load_tensors(&dir.join("optimizer.safetensors")) {
            Ok(o) => o,
            Err(Error::NotFound(_)) => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        let actual = tensor_map_hash(&params)?;
        if actual != meta.params_hash {
            return Err(Error::Invariant(format!(
                "{}: parameters hash {actual} does not match metadata {}",
                dir.display(),
                meta.params_hash
            )));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }
}
