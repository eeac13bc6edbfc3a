//! Versioned JSON checkpoints for metric parameters and fitted GP states.
//! All floats round-trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ItemCatalog;
use crate::error::{Error, Result};
use crate::gp::GpState;
use crate::siamese::SiameseEnsembleParams;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsCheckpoint {
    pub version: u32,
    pub params: SiameseEnsembleParams,
}

/// A fitted GP snapshot: metric, log noise, train item ids and targets.
/// Reloading against the same catalog reproduces the NLL exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpCheckpoint {
    pub version: u32,
    pub metric: SiameseEnsembleParams,
    pub log_noise: f64,
    pub train_item_ids: Vec<String>,
    pub r: Vec<f64>,
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{what} checkpoint version {version} is unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    Ok(())
}

pub fn save_params(path: impl AsRef<Path>, params: &SiameseEnsembleParams) -> Result<()> {
    let ckpt = ParamsCheckpoint {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    let json = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<SiameseEnsembleParams> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
    let ckpt: ParamsCheckpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    check_version(ckpt.version, "params")?;
    ckpt.params.validate()?;
    Ok(ckpt.params)
}

impl GpCheckpoint {
    pub fn from_state(state: &GpState, catalog: &ItemCatalog) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            metric: state.metric.clone(),
            log_noise: state.log_noise,
            train_item_ids: state
                .train_items
                .iter()
                .map(|&i| catalog.item_id(i).to_string())
                .collect(),
            r: state.r.iter().copied().collect(),
        }
    }

    /// Re-resolve item ids against a catalog and refit the factorization.
    pub fn resolve(&self, catalog: &ItemCatalog) -> Result<GpState> {
        check_version(self.version, "gp")?;
        let items = self
            .train_item_ids
            .iter()
            .map(|id| catalog.index_of(id))
            .collect::<Result<Vec<_>>>()?;
        GpState::fit(
            self.metric.clone(),
            self.log_noise,
            catalog,
            items,
            nalgebra::DVector::from_column_slice(&self.r),
        )
    }
}

pub fn save_gp(path: impl AsRef<Path>, state: &GpState, catalog: &ItemCatalog) -> Result<()> {
    let ckpt = GpCheckpoint::from_state(state, catalog);
    let json =
        serde_json::to_string_pretty(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_gp(path: impl AsRef<Path>) -> Result<GpCheckpoint> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
    let ckpt: GpCheckpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    check_version(ckpt.version, "gp")?;
    Ok(ckpt)
}
