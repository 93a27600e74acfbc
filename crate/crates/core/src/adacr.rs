//! Importance-aware retention allocation.
//!
//! Each block's importance is derived from the mean cosine similarity
//! between its input and output token columns (by default `1 - cos`, so a
//! block that barely changes the residual stream counts as unimportant).
//! Importances are divided by their mean and
//! mapped linearly onto retention ratios between `mrr` (importance 0) and
//! `trr` (importance 1), then clamped and rescaled so the parameter-weighted
//! retention meets the target.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationBatch;
use crate::error::{Error, Result};
use crate::linalg::{rank_for_retention, Mat};
use crate::model_io::{ModelHandle, SlotId, SlotKind};

/// Relative tolerance on the parameter-weighted retention.
pub const BUDGET_TOLERANCE: f64 = 0.01;

const MAX_RESCALE_PASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMode {
    /// Importance is the input/output cosine similarity itself.
    Cos,
    /// Importance is one minus the cosine similarity: blocks that rewrite
    /// their input more keep more rank.
    #[default]
    OneMinusCos,
}

impl fmt::Display for ImportanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceMode::Cos => "cos",
            ImportanceMode::OneMinusCos => "one_minus_cos",
        })
    }
}

impl FromStr for ImportanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(ImportanceMode::Cos),
            "one_minus_cos" => Ok(ImportanceMode::OneMinusCos),
            other => Err(Error::Config(format!(
                "unknown importance mode {other:?} (expected cos or one_minus_cos)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub block_id: usize,
    pub importance: f64,
    pub normalized: f64,
    pub retention: f64,
    /// Ranks of the slots stored as low-rank pairs. Slots absent here stay dense.
    pub ranks: BTreeMap<SlotKind, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub blocks: Vec<BlockPlan>,
    pub trr: f64,
    pub mrr: f64,
    pub achieved_retention: f64,
    pub importance_mode: ImportanceMode,
}

impl CompressionPlan {
    pub fn rank(&self, id: SlotId) -> Option<usize> {
        self.blocks
            .get(id.block)
            .and_then(|b| b.ranks.get(&id.kind).copied())
    }

    /// Slots to be factorized, in manifest order, with their ranks.
    pub fn compressed_slots(&self) -> Vec<(SlotId, usize)> {
        self.blocks
            .iter()
            .flat_map(|b| {
                b.ranks
                    .iter()
                    .map(move |(k, r)| (SlotId::new(b.block_id, *k), *r))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

/// Mean over token columns of `cos(input_t, output_t)`; a column pair with
/// a zero-norm side counts as similarity 0.
pub fn layer_importance(block_in: &Mat, block_out: &Mat) -> Result<f64> {
    if block_in.shape() != block_out.shape() {
        return Err(Error::Shape(format!(
            "block input {:?} and output {:?} differ",
            block_in.shape(),
            block_out.shape()
        )));
    }
    let t = block_in.ncols();
    if t == 0 {
        return Err(Error::Shape("no token columns".into()));
    }
    let total: f64 = block_in
        .column_iter()
        .zip(block_out.column_iter())
        .map(|(x, y)| {
            let denom = x.norm() * y.norm();
            if denom > 0.0 {
                x.dot(&y) / denom
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / t as f64)
}

/// Divides each importance by the mean importance.
pub fn normalize_importance(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::DegenerateImportance(0.0));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if !(mean.abs() >= 1e-12) {
        return Err(Error::DegenerateImportance(mean));
    }
    Ok(values.iter().map(|v| v / mean).collect())
}

fn weighted_mean(ratios: &[f64], params: &[usize], total: f64) -> f64 {
    ratios
        .iter()
        .zip(params)
        .map(|(r, p)| r * *p as f64)
        .sum::<f64>()
        / total
}

/// Unclamped retention ratio `mrr + i_n * (trr - mrr)`, evaluated so that
/// `i_n = 0` gives exactly `mrr` and `i_n = 1` exactly `trr`.
pub fn raw_ratio(i_n: f64, trr: f64, mrr: f64) -> f64 {
    trr * i_n + mrr * (1.0 - i_n)
}

/// `mrr + I_n * (trr - mrr)` per block, clamped to `[mrr, 1]`, then with the
/// excess over `mrr` rescaled by one common factor until the
/// parameter-weighted mean is `trr`.
pub fn assign_ratios(i_n: &[f64], trr: f64, mrr: f64, param_counts: &[usize]) -> Result<Vec<f64>> {
    if !(mrr > 0.0 && mrr <= trr && trr <= 1.0) {
        return Err(Error::Budget(format!(
            "need 0 < mrr <= trr <= 1, got mrr={mrr}, trr={trr}"
        )));
    }
    if i_n.len() != param_counts.len() {
        return Err(Error::Shape(format!(
            "{} importances for {} parameter counts",
            i_n.len(),
            param_counts.len()
        )));
    }
    if i_n.is_empty() || param_counts.contains(&0) {
        return Err(Error::Budget(
            "every block needs a positive parameter count".into(),
        ));
    }
    let total = param_counts.iter().sum::<usize>() as f64;
    let mut ratios: Vec<f64> = i_n
        .iter()
        .map(|i| raw_ratio(*i, trr, mrr).clamp(mrr, 1.0))
        .collect();

    for _ in 0..MAX_RESCALE_PASSES {
        let mean = weighted_mean(&ratios, param_counts, total);
        if (mean - trr).abs() <= 1e-12 * trr {
            break;
        }
        let (mut saturated, mut excess) = (0.0, 0.0);
        for (r, p) in ratios.iter().zip(param_counts) {
            if *r >= 1.0 {
                saturated += *p as f64;
            } else {
                excess += (r - mrr) * *p as f64;
            }
        }
        if excess <= 0.0 {
            break;
        }
        let scale = (trr * total - saturated - mrr * (total - saturated)) / excess;
        if !(scale > 0.0) {
            break;
        }
        for r in ratios.iter_mut().filter(|r| **r < 1.0) {
            *r = (mrr + scale * (*r - mrr)).min(1.0);
        }
    }

    let achieved = weighted_mean(&ratios, param_counts, total);
    if (achieved - trr).abs() > BUDGET_TOLERANCE * trr {
        return Err(Error::Budget(format!(
            "retention {achieved:.4} cannot reach target {trr} within {BUDGET_TOLERANCE}"
        )));
    }
    Ok(ratios)
}

/// Per-block importance from the captured block input/output pairs.
pub fn block_importances(calib: &CalibrationBatch, mode: ImportanceMode) -> Result<Vec<f64>> {
    calib
        .per_block_io
        .iter()
        .enumerate()
        .map(|(b, io)| {
            let cos = layer_importance(&io.input, &io.output)
                .map_err(|e| e.context(&format!("block {b}")))?;
            Ok(match mode {
                ImportanceMode::Cos => cos,
                ImportanceMode::OneMinusCos => 1.0 - cos,
            })
        })
        .collect()
}

/// Computes importances, ratios and per-slot ranks for every block.
///
/// Blocks whose ratio reaches 1 keep dense slots. Otherwise each slot gets
/// `rank_for_retention` at the block's ratio; the ranks lost to flooring are
/// then handed back one at a time, largest fractional remainder first,
/// while that moves the total parameter count closer to `trr` of the dense
/// count.
pub fn build_plan(
    calib: &CalibrationBatch,
    model: &ModelHandle,
    trr: f64,
    mrr: f64,
    mode: ImportanceMode,
) -> Result<CompressionPlan> {
    if calib.per_block_io.len() != model.blocks.len() {
        return Err(Error::ManifestMismatch(format!(
            "calibration covers {} blocks, model has {}",
            calib.per_block_io.len(),
            model.blocks.len()
        )));
    }
    let importance = block_importances(calib, mode)?;
    let normalized = normalize_importance(&importance)?;
    plan_from_importance(model, importance, normalized, trr, mrr, mode)
}

pub(crate) fn plan_from_importance(
    model: &ModelHandle,
    importance: Vec<f64>,
    normalized: Vec<f64>,
    trr: f64,
    mrr: f64,
    mode: ImportanceMode,
) -> Result<CompressionPlan> {
    let shapes: Vec<[(usize, usize); 2]> = model
        .blocks
        .iter()
        .map(|b| [b.w1.weights.shape(), b.w2.weights.shape()])
        .collect();
    let params: Vec<usize> = shapes
        .iter()
        .map(|s| s.iter().map(|(m, n)| m * n).sum())
        .collect();
    let ratios = assign_ratios(&normalized, trr, mrr, &params)?;

    struct Candidate {
        block: usize,
        kind: SlotKind,
        remainder: f64,
        step: usize,
        dense: usize,
        cap: usize,
    }
    let mut ranks: Vec<BTreeMap<SlotKind, usize>> = vec![BTreeMap::new(); shapes.len()];
    let mut candidates = Vec::new();
    let mut stored = 0usize;
    for (b, (slot_shapes, &ratio)) in shapes.iter().zip(&ratios).enumerate() {
        for (kind, &(m, n)) in SlotKind::ALL.into_iter().zip(slot_shapes) {
            if ratio >= 1.0 {
                stored += m * n;
                continue;
            }
            let k = rank_for_retention(m, n, ratio);
            let ideal = ratio * (m * n) as f64 / (m + n) as f64;
            ranks[b].insert(kind, k);
            stored += k * (m + n);
            candidates.push(Candidate {
                block: b,
                kind,
                remainder: ideal - k as f64,
                step: m + n,
                dense: m * n,
                cap: m.min(n),
            });
        }
    }

    let total: usize = params.iter().sum();
    let target = trr * total as f64;
    // Stable sort keeps manifest order among equal remainders.
    candidates.sort_by(|a, b| b.remainder.total_cmp(&a.remainder));
    for c in &candidates {
        let k = ranks[c.block][&c.kind];
        let next = stored + c.step;
        if k < c.cap
            && (k + 1) * c.step < c.dense
            && (next as f64 - target).abs() < (stored as f64 - target).abs()
        {
            ranks[c.block].insert(c.kind, k + 1);
            stored = next;
        }
    }

    let blocks = ranks
        .into_iter()
        .enumerate()
        .map(|(b, r)| BlockPlan {
            block_id: b,
            importance: importance[b],
            normalized: normalized[b],
            retention: ratios[b],
            ranks: r,
        })
        .collect();
    Ok(CompressionPlan {
        blocks,
        trr,
        mrr,
        achieved_retention: stored as f64 / total as f64,
        importance_mode: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_opposite_columns() {
        let x = Mat::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 3.0, 4.0]);
        assert!((layer_importance(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((layer_importance(&x, &-&x).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_cosines() {
        let input = Mat::identity(2, 2);
        let output = Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert!((layer_importance(&input, &output).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_columns_count_as_zero() {
        let input = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let output = Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((layer_importance(&input, &output).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn importance_shape_mismatch() {
        assert!(matches!(
            layer_importance(&Mat::zeros(2, 3), &Mat::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            normalize_importance(&[0.5, 0.5, 0.5]).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        let n = normalize_importance(&[0.2, 0.4]).unwrap();
        assert!((n[0] - 2.0 / 3.0).abs() < 1e-15 && (n[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            normalize_importance(&[1.0, -1.0]),
            Err(Error::DegenerateImportance(_))
        ));
        assert!(matches!(
            normalize_importance(&[]),
            Err(Error::DegenerateImportance(_))
        ));
    }

    #[test]
    fn ratio_formula_boundaries() {
        let r = assign_ratios(&[1.0, 1.0], 0.6, 0.5, &[10, 10]).unwrap();
        assert_eq!(r, vec![0.6, 0.6]);
        let r = assign_ratios(&[1.5, 0.5], 0.6, 0.5, &[10, 10]).unwrap();
        assert!((r[0] - 0.65).abs() < 1e-12 && (r[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn upper_clamp_redistributes() {
        // raw ratios (1.5, 0.6, 0.6): the first clamps to 1 and the rest absorb the budget
        let r = assign_ratios(&[2.5, 0.25, 0.25], 0.9, 0.5, &[1, 1, 1]).unwrap();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 0.85).abs() < 1e-12 && r[1] == r[2]);
    }

    #[test]
    fn budget_validation() {
        assert!(matches!(
            assign_ratios(&[1.0], 0.4, 0.5, &[1]),
            Err(Error::Budget(_))
        ));
        assert!(matches!(
            assign_ratios(&[1.0], 1.2, 0.5, &[1]),
            Err(Error::Budget(_))
        ));
        assert!(matches!(
            assign_ratios(&[1.0], 0.5, 0.0, &[1]),
            Err(Error::Budget(_))
        ));
        assert!(matches!(
            assign_ratios(&[1.0, 1.0], 0.6, 0.5, &[1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "cos".parse::<ImportanceMode>().unwrap(),
            ImportanceMode::Cos
        );
        assert_eq!(
            "one_minus_cos".parse::<ImportanceMode>().unwrap(),
            ImportanceMode::OneMinusCos
        );
        assert!("sin".parse::<ImportanceMode>().is_err());
        assert_eq!(
            serde_json::to_value(ImportanceMode::OneMinusCos).unwrap(),
            "one_minus_cos"
        );
    }
}
