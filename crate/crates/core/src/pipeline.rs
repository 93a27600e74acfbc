//! End-to-end compression: bucketing, activation capture, whitening,
//! retention planning and per-slot compensation, plus evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adacomp::{ada_comp_factored, svd_loss, CompLossTrace, DEFAULT_ITERATIONS};
use crate::adacr::{build_plan, layer_importance, CompressionPlan, ImportanceMode};
use crate::calibration::{
    capture_activations, capture_samples, stack_of_batch, CalibrationBatch, DEFAULT_BUCKETS,
};
use crate::error::{Error, Result};
use crate::linalg::{gram_from_factor, LowRankPair, Mat, Whitener, DEFAULT_REL_DAMPING};
use crate::model_io::{CalibrationTensor, ModelHandle, SlotId, SlotWeights};

/// Fraction of calibration samples, taken from the end, held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// Environment variable capping the compression worker pool.
pub const THREADS_ENV: &str = "LOWRANK_THREADS";

const OVERLAP_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Target retention ratio.
    pub trr: f64,
    /// Minimum retention ratio.
    pub mrr: f64,
    /// Alternating compensation rounds.
    pub iterations: usize,
    /// Stack-of-batch bucket count.
    pub bucket_size: usize,
    pub whiten: bool,
    pub importance_mode: ImportanceMode,
    pub seed: u64,
    /// Pseudoinverse cut-off; `None` picks `max(dims) * eps` per solve.
    pub rel_tol: Option<f64>,
    pub rel_damping: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            trr: 0.6,
            mrr: 0.5,
            iterations: DEFAULT_ITERATIONS,
            bucket_size: DEFAULT_BUCKETS,
            whiten: true,
            importance_mode: ImportanceMode::default(),
            seed: 0,
            rel_tol: None,
            rel_damping: DEFAULT_REL_DAMPING,
        }
    }
}

impl PipelineConfig {
    /// Config for a target retention with `mrr = trr - 0.1` (floored at a
    /// small positive value).
    pub fn with_target(trr: f64) -> Self {
        Self {
            trr,
            mrr: default_mrr(trr),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.trr > 0.0 && self.trr <= 1.0) {
            return Err(Error::Config(format!(
                "target retention must be in (0, 1], got {}",
                self.trr
            )));
        }
        if !(self.mrr > 0.0 && self.mrr <= self.trr) {
            return Err(Error::Config(format!(
                "minimum retention must be in (0, trr={}], got {}",
                self.trr, self.mrr
            )));
        }
        if self.bucket_size == 0 {
            return Err(Error::Config("bucket size must be at least 1".into()));
        }
        if let Some(t) = self.rel_tol {
            if !(t > 0.0) {
                return Err(Error::Config(format!("rel_tol must be positive, got {t}")));
            }
        }
        if !(self.rel_damping >= 0.0) {
            return Err(Error::Config(format!(
                "rel_damping must be non-negative, got {}",
                self.rel_damping
            )));
        }
        Ok(())
    }
}

pub fn default_mrr(trr: f64) -> f64 {
    let m = trr - 0.1;
    if m > 0.0 {
        m
    } else {
        trr / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct CompressionOutput {
    pub model: ModelHandle,
    pub plan: CompressionPlan,
    pub factors: BTreeMap<SlotId, LowRankPair>,
    /// One trace per compressed slot, in manifest order.
    pub traces: Vec<(SlotId, CompLossTrace)>,
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Compresses `model` using `samples` (all of them) as calibration data.
///
/// Order of work: stack-of-batch, activation capture on the original model,
/// retention plan, then per-slot whitening and compensation. Slots are
/// processed in parallel and merged in manifest order.
pub fn compress_with_samples(
    model: &ModelHandle,
    samples: &[Mat],
    cfg: &PipelineConfig,
) -> Result<CompressionOutput> {
    cfg.validate()?;
    let bucketed = stack_of_batch(samples, cfg.bucket_size, cfg.seed)?;
    let calib = capture_activations(model, &bucketed)?;
    compress_with_activations(model, &calib, cfg)
}

fn compress_slot(
    model: &ModelHandle,
    calib: &CalibrationBatch,
    cfg: &PipelineConfig,
    id: SlotId,
    k: usize,
) -> Result<(LowRankPair, CompLossTrace)> {
    let w = model.slot(id)?.weights.to_dense();
    let x = calib.input(id)?;
    let r = calib.input_factor(id)?;
    let whitener = if cfg.whiten {
        Some(Whitener::with_retries(
            &gram_from_factor(&r),
            cfg.rel_damping,
        )?)
    } else {
        None
    };
    ada_comp_factored(
        &w,
        &r,
        x.ncols(),
        k,
        cfg.iterations,
        cfg.rel_tol,
        whitener.as_ref(),
    )
}

/// Compression given activations already captured from the original model.
pub fn compress_with_activations(
    model: &ModelHandle,
    calib: &CalibrationBatch,
    cfg: &PipelineConfig,
) -> Result<CompressionOutput> {
    cfg.validate()?;
    let plan = build_plan(calib, model, cfg.trr, cfg.mrr, cfg.importance_mode)?;
    let jobs = plan.compressed_slots();

    let results: Vec<(SlotId, LowRankPair, CompLossTrace)> = worker_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(id, k)| {
                compress_slot(model, calib, cfg, id, k)
                    .map(|(pair, trace)| (id, pair, trace))
                    .map_err(|e| e.context(&id.to_string()))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut factors = BTreeMap::new();
    let mut traces = Vec::with_capacity(results.len());
    for (id, pair, trace) in results {
        factors.insert(id, pair);
        traces.push((id, trace));
    }
    let compressed = model.with_factors(&factors)?;
    Ok(CompressionOutput {
        model: compressed,
        plan,
        factors,
        traces,
    })
}

/// Compresses with the calibration file at `calib_path`, fitting on all but
/// the trailing held-out fraction.
pub fn compress_model(
    model: &ModelHandle,
    calib_path: &Path,
    cfg: &PipelineConfig,
) -> Result<CompressionOutput> {
    let calib = CalibrationTensor::read(calib_path)?;
    let (fit, _) = calib.split_holdout(HOLDOUT_FRACTION);
    compress_with_samples(model, &fit, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: String,
    pub frob_rel_err: f64,
    pub data_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub output_mse: f64,
    pub output_cosine_mean: f64,
    pub overlap_statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub original: usize,
    pub compressed: usize,
    pub achieved_retention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_slot: Vec<SlotReport>,
    pub end_to_end: EndToEnd,
    pub params: ParamReport,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Histogram intersection of two value sets over 64 equal bins spanning
/// their joint range.
pub fn histogram_overlap(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    if !(hi > lo) {
        return 1.0;
    }
    let width = (hi - lo) / OVERLAP_BINS as f64;
    let hist = |vals: &[f64]| {
        let mut h = [0u128; OVERLAP_BINS];
        for v in vals {
            let bin = (((v - lo) / width) as usize).min(OVERLAP_BINS - 1);
            h[bin] += 1;
        }
        h
    };
    // Intersection of the normalized histograms, on exact integer counts.
    let (na, nb) = (a.len() as u128, b.len() as u128);
    let (ha, hb) = (hist(a), hist(b));
    let shared: u128 = ha.iter().zip(&hb).map(|(x, y)| (x * nb).min(y * na)).sum();
    shared as f64 / (na * nb) as f64
}

fn check_aligned(original: &ModelHandle, compressed: &ModelHandle) -> Result<()> {
    if original.hidden_dim != compressed.hidden_dim
        || original.blocks.len() != compressed.blocks.len()
    {
        return Err(Error::ManifestMismatch(format!(
            "models differ: {} blocks of width {} vs {} blocks of width {}",
            original.blocks.len(),
            original.hidden_dim,
            compressed.blocks.len(),
            compressed.hidden_dim
        )));
    }
    for id in original.slot_ids() {
        let (a, b) = (
            original.slot(id)?.weights.shape(),
            compressed.slot(id)?.weights.shape(),
        );
        if a != b {
            return Err(Error::ManifestMismatch(format!("{id}: {a:?} vs {b:?}")));
        }
    }
    Ok(())
}

/// Per-slot and end-to-end comparison of `compressed` against `original`
/// on `samples` (each `tokens x d`).
pub fn eval_compression(
    original: &ModelHandle,
    compressed: &ModelHandle,
    samples: &[Mat],
) -> Result<EvalReport> {
    check_aligned(original, compressed)?;
    let reference = capture_samples(original, samples)?;

    let mut per_slot = Vec::new();
    for id in original.slot_ids() {
        let w = original.slot(id)?.weights.to_dense();
        let x = reference.input(id)?;
        let wx = &w * x;
        let approx = &compressed.slot(id)?.weights;
        let (frob, data) = match approx {
            SlotWeights::Dense(d) => ((d - &w).norm(), (d * x - &wx).norm()),
            SlotWeights::LowRank(p) => ((p.product() - &w).norm(), svd_loss(p, &w, x)?.sqrt()),
        };
        per_slot.push(SlotReport {
            slot: id.to_string(),
            frob_rel_err: ratio(frob, w.norm()),
            data_rel_err: ratio(data, wx.norm()),
        });
    }

    let outputs: Vec<(Mat, Mat)> = samples
        .par_iter()
        .map(|s| {
            let x = s.transpose();
            Ok((original.forward(&x)?, compressed.forward(&x)?))
        })
        .collect::<Result<_>>()?;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut cos_sum = 0.0;
    let mut cols = 0usize;
    let mut flat_a = Vec::new();
    let mut flat_b = Vec::new();
    for (a, b) in &outputs {
        sq += (a - b).norm_squared();
        count += a.len();
        cos_sum += layer_importance(a, b)? * a.ncols() as f64;
        cols += a.ncols();
        flat_a.extend(a.iter().copied());
        flat_b.extend(b.iter().copied());
    }
    if !sq.is_finite() {
        return Err(Error::Numerical("non-finite output error".into()));
    }

    let dense = original.dense_param_count();
    let stored = compressed.param_count();
    Ok(EvalReport {
        per_slot,
        end_to_end: EndToEnd {
            output_mse: sq / count as f64,
            output_cosine_mean: cos_sum / cols as f64,
            overlap_statistic: histogram_overlap(&flat_a, &flat_b),
        },
        params: ParamReport {
            original: dense,
            compressed: stored,
            achieved_retention: stored as f64 / dense as f64,
        },
    })
}

/// Held-out end-to-end output MSE of `compressed` relative to `original`.
pub fn output_mse(
    original: &ModelHandle,
    compressed: &ModelHandle,
    samples: &[Mat],
) -> Result<f64> {
    output_mse_against(&forward_samples(original, samples)?, compressed, samples)
}

/// Model outputs (`d x tokens`) for each sample (`tokens x d`).
pub fn forward_samples(model: &ModelHandle, samples: &[Mat]) -> Result<Vec<Mat>> {
    samples
        .iter()
        .map(|s| model.forward(&s.transpose()))
        .collect()
}

/// [`output_mse`] against precomputed outputs of the original model.
pub fn output_mse_against(
    reference: &[Mat],
    compressed: &ModelHandle,
    samples: &[Mat],
) -> Result<f64> {
    if reference.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} reference outputs for {} samples",
            reference.len(),
            samples.len()
        )));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (a, s) in reference.iter().zip(samples) {
        let b = compressed.forward(&s.transpose())?;
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "reference output {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        count += a.len();
        sq += (a - b).norm_squared();
    }
    Ok(sq / count as f64)
}

/// `slot,half_step,loss` rows; half-step 0 is the truncated initialization.
pub fn traces_csv(traces: &[(SlotId, CompLossTrace)]) -> String {
    let mut out = String::from("slot,half_step,loss\n");
    for (id, trace) in traces {
        for (step, loss) in trace.rows() {
            let _ = writeln!(out, "{id},{step},{loss:e}");
        }
    }
    out
}
