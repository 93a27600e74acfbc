use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::manifest::SlotId;
use super::model::ModelHandle;
use crate::adacr::CompressionPlan;
use crate::error::{Error, Result};
use crate::linalg::LowRankPair;

pub const MODEL_MANIFEST_FILE: &str = "model.json";
pub const MODEL_CONTAINER_FILE: &str = "model.st";

/// Default container path for a manifest: same stem, `.st` extension.
pub fn container_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("st")
}

/// Writes `model` with the planned slots replaced by `factors` to
/// `out_dir/model.json` and `out_dir/model.st`. Returns the saved model.
pub fn save_compressed(
    model: &ModelHandle,
    plan: &CompressionPlan,
    factors: &BTreeMap<SlotId, LowRankPair>,
    out_dir: &Path,
) -> Result<ModelHandle> {
    for (id, rank) in plan.compressed_slots() {
        let pair = factors.get(&id).ok_or_else(|| {
            Error::Shape(format!("plan compresses {id} but no factors were given"))
        })?;
        if pair.rank() != rank {
            return Err(Error::Shape(format!(
                "{id}: plan rank {rank}, factors have rank {}",
                pair.rank()
            )));
        }
    }
    if let Some(id) = factors.keys().find(|id| plan.rank(**id).is_none()) {
        return Err(Error::Shape(format!(
            "factors given for {id}, which the plan keeps dense"
        )));
    }
    let compressed = model.with_factors(factors)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    compressed.save(
        &out_dir.join(MODEL_MANIFEST_FILE),
        &out_dir.join(MODEL_CONTAINER_FILE),
    )?;
    Ok(compressed)
}
