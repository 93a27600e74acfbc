//! Calibration: stack-of-batch bucketing, activation capture from the
//! original model, and Gram accumulation for whitening.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{data_factor, Mat};
use crate::model_io::container::{self, DType, TensorBlob, TensorMap};
use crate::model_io::{ModelHandle, SlotId, SlotKind};

/// Default number of buckets.
pub const DEFAULT_BUCKETS: usize = 32;

/// Samples averaged into buckets after a seeded shuffle.
#[derive(Debug, Clone)]
pub struct BucketedCalib {
    /// Bucket means, each `tokens x d`.
    pub buckets: Vec<Mat>,
    /// Source sample indices averaged into each bucket.
    pub members: Vec<Vec<usize>>,
    /// `ceil(N / M)`: the largest number of samples in any bucket.
    pub mini_bsz: usize,
    pub source_count: usize,
}

/// Shuffles `samples` with a seeded permutation and averages consecutive runs
/// into `min(N, M)` buckets.
///
/// Bucket sizes never exceed `ceil(N / M)`. When `N` is not a multiple of
/// `M`, leading buckets take `mini_bsz` samples and trailing buckets take
/// fewer, so that every bucket is non-empty and every sample is used once.
pub fn stack_of_batch(samples: &[Mat], m_buckets: usize, seed: u64) -> Result<BucketedCalib> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Config(
            "stack_of_batch needs at least one sample".into(),
        ));
    }
    if m_buckets == 0 {
        return Err(Error::Config("bucket count must be at least 1".into()));
    }
    let shape = samples[0].shape();
    if let Some(i) = samples.iter().position(|s| s.shape() != shape) {
        return Err(Error::Shape(format!(
            "sample {i} is {:?}, sample 0 is {shape:?}",
            samples[i].shape()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let count = n.min(m_buckets);
    let mini_bsz = n.div_ceil(m_buckets);
    let mut extra = n - count;
    let mut members = Vec::with_capacity(count);
    let mut cursor = 0;
    for _ in 0..count {
        let take = 1 + extra.min(mini_bsz - 1);
        extra -= take - 1;
        members.push(order[cursor..cursor + take].to_vec());
        cursor += take;
    }
    debug_assert_eq!(cursor, n);

    let buckets = members.iter().map(|idx| mean_of(samples, idx)).collect();
    Ok(BucketedCalib {
        buckets,
        members,
        mini_bsz,
        source_count: n,
    })
}

/// Mean anchored at the first member, so identical members average to
/// themselves exactly.
fn mean_of(samples: &[Mat], idx: &[usize]) -> Mat {
    let anchor = &samples[idx[0]];
    if idx.len() == 1 {
        return anchor.clone();
    }
    let mut dev = Mat::zeros(anchor.nrows(), anchor.ncols());
    for &i in &idx[1..] {
        dev += &samples[i] - anchor;
    }
    anchor + dev / idx.len() as f64
}

#[derive(Debug, Clone)]
pub struct BlockIo {
    /// Hidden state entering the block, `d x tokens`.
    pub input: Mat,
    /// Hidden state leaving the block, `d x tokens`.
    pub output: Mat,
}

/// Activations captured from one forward sweep of the original model.
#[derive(Debug, Clone)]
pub struct CalibrationBatch {
    /// Direct operand of each weight slot, `in_dim x total_tokens`.
    pub per_matrix_inputs: BTreeMap<SlotId, Mat>,
    /// Indexed by block id.
    pub per_block_io: Vec<BlockIo>,
    factors: BTreeMap<SlotId, OnceLock<Mat>>,
}

impl CalibrationBatch {
    pub fn input(&self, id: SlotId) -> Result<&Mat> {
        self.per_matrix_inputs
            .get(&id)
            .ok_or_else(|| Error::ManifestMismatch(format!("no captured input for {id}")))
    }

    /// [`data_factor`] of the slot's input, computed on first use and shared
    /// by later calls. Slots added to `per_matrix_inputs` after capture are
    /// factored on every call.
    pub fn input_factor(&self, id: SlotId) -> Result<Cow<'_, Mat>> {
        let x = self.input(id)?;
        let Some(cell) = self.factors.get(&id) else {
            return Ok(Cow::Owned(data_factor(x)?));
        };
        if let Some(r) = cell.get() {
            return Ok(Cow::Borrowed(r));
        }
        let r = data_factor(x)?;
        Ok(Cow::Borrowed(cell.get_or_init(|| r)))
    }

    pub fn total_tokens(&self) -> usize {
        self.per_block_io.first().map_or(0, |io| io.input.ncols())
    }

    pub fn to_tensors(&self) -> Result<TensorMap> {
        let mut out = TensorMap::new();
        let mut put = |name: String, m: &Mat| -> Result<()> {
            let row_major: Vec<f64> = m.transpose().iter().copied().collect();
            out.insert(
                name,
                TensorBlob::from_f64(DType::F64, vec![m.nrows(), m.ncols()], &row_major)?,
            );
            Ok(())
        };
        for (i, io) in self.per_block_io.iter().enumerate() {
            put(format!("block.{i}.in"), &io.input)?;
            put(format!("block.{i}.out"), &io.output)?;
        }
        for (id, x) in &self.per_matrix_inputs {
            put(format!("slot.{id}.x"), x)?;
        }
        Ok(out)
    }

    /// Writes the debugging dump: `block.{i}.in`, `block.{i}.out`, `slot.{name}.x`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        container::write(path, &self.to_tensors()?)
    }
}

struct SampleCapture {
    slot_inputs: Vec<(Mat, Mat)>,
    block_io: Vec<(Mat, Mat)>,
}

fn capture_one(model: &ModelHandle, sample: &Mat) -> Result<SampleCapture> {
    let mut x = sample.transpose();
    let mut slot_inputs = Vec::with_capacity(model.blocks.len());
    let mut block_io = Vec::with_capacity(model.blocks.len());
    for (b, block) in model.blocks.iter().enumerate() {
        let trace = block.forward_traced(&x, model.activation);
        if !trace
            .output
            .iter()
            .chain(trace.hidden.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite activation in block {b}"
            )));
        }
        slot_inputs.push((trace.normed, trace.hidden));
        block_io.push((x, trace.output.clone()));
        x = trace.output;
    }
    Ok(SampleCapture {
        slot_inputs,
        block_io,
    })
}

fn hcat(parts: &[&Mat]) -> Mat {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for p in parts {
        out.columns_mut(c, p.ncols()).copy_from(*p);
        c += p.ncols();
    }
    out
}

/// Forward pass of `model` over `samples` (each `tokens x d`), concatenating
/// token columns in sample order.
pub fn capture_samples(model: &ModelHandle, samples: &[Mat]) -> Result<CalibrationBatch> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to capture".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.ncols() != model.hidden_dim) {
        return Err(Error::Shape(format!(
            "calibration dim {} does not match model hidden_dim {}",
            s.ncols(),
            model.hidden_dim
        )));
    }
    let captures: Vec<SampleCapture> = samples
        .par_iter()
        .map(|s| capture_one(model, s))
        .collect::<Result<_>>()?;

    let mut per_matrix_inputs = BTreeMap::new();
    let mut per_block_io = Vec::with_capacity(model.blocks.len());
    for b in 0..model.blocks.len() {
        let w1: Vec<&Mat> = captures.iter().map(|c| &c.slot_inputs[b].0).collect();
        let w2: Vec<&Mat> = captures.iter().map(|c| &c.slot_inputs[b].1).collect();
        per_matrix_inputs.insert(SlotId::new(b, SlotKind::W1), hcat(&w1));
        per_matrix_inputs.insert(SlotId::new(b, SlotKind::W2), hcat(&w2));
        let ins: Vec<&Mat> = captures.iter().map(|c| &c.block_io[b].0).collect();
        let outs: Vec<&Mat> = captures.iter().map(|c| &c.block_io[b].1).collect();
        per_block_io.push(BlockIo {
            input: hcat(&ins),
            output: hcat(&outs),
        });
    }
    let factors = per_matrix_inputs
        .keys()
        .map(|id| (*id, OnceLock::new()))
        .collect();
    Ok(CalibrationBatch {
        per_matrix_inputs,
        per_block_io,
        factors,
    })
}

/// Runs the original model over every bucket.
pub fn capture_activations(model: &ModelHandle, calib: &BucketedCalib) -> Result<CalibrationBatch> {
    capture_samples(model, &calib.buckets)
}

/// `x * x^T`, with the lower triangle mirrored from the upper so the result
/// is exactly symmetric.
pub fn gram_accumulate(x: &Mat) -> Mat {
    crate::linalg::symmetrize_upper(x * x.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::{Activation, Block, Slot};

    fn const_sample(v: f64) -> Mat {
        Mat::from_element(3, 2, v)
    }

    #[test]
    fn eight_into_four_pairs() {
        let samples: Vec<Mat> = (0..8).map(|i| const_sample(i as f64)).collect();
        let b = stack_of_batch(&samples, 4, 7).unwrap();
        assert_eq!(b.buckets.len(), 4);
        assert_eq!(b.mini_bsz, 2);
        let mut all: Vec<usize> = b.members.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        for (bucket, idx) in b.buckets.iter().zip(&b.members) {
            assert_eq!(idx.len(), 2);
            let want = (idx[0] + idx[1]) as f64 / 2.0;
            assert!(bucket.iter().all(|v| (v - want).abs() < 1e-15));
        }
    }

    #[test]
    fn equal_counts_permute() {
        let samples: Vec<Mat> = (0..4).map(|i| const_sample(i as f64)).collect();
        let b = stack_of_batch(&samples, 4, 1).unwrap();
        assert_eq!(b.mini_bsz, 1);
        for (bucket, idx) in b.buckets.iter().zip(&b.members) {
            assert_eq!(bucket, &samples[idx[0]]);
        }
    }

    #[test]
    fn fewer_samples_than_buckets() {
        let samples: Vec<Mat> = (0..3).map(|i| const_sample(i as f64)).collect();
        let b = stack_of_batch(&samples, 8, 1).unwrap();
        assert_eq!(b.buckets.len(), 3);
        assert_eq!(b.mini_bsz, 1);
    }

    #[test]
    fn uneven_split_front_loads() {
        let samples: Vec<Mat> = (0..9).map(|i| const_sample(i as f64)).collect();
        let b = stack_of_batch(&samples, 8, 1).unwrap();
        let sizes: Vec<usize> = b.members.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn constant_samples_are_a_fixed_point() {
        let samples = vec![const_sample(0.1); 7];
        for m in 1..=7 {
            let b = stack_of_batch(&samples, m, 3).unwrap();
            assert!(b.buckets.iter().all(|x| x == &samples[0]));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(stack_of_batch(&[], 2, 0), Err(Error::Config(_))));
        assert!(matches!(
            stack_of_batch(&[const_sample(1.0)], 0, 0),
            Err(Error::Config(_))
        ));
        let mixed = vec![const_sample(1.0), Mat::zeros(2, 2)];
        assert!(matches!(stack_of_batch(&mixed, 1, 0), Err(Error::Shape(_))));
    }

    fn single_block(d: usize, w1: Mat, w2: Mat, act: Activation) -> ModelHandle {
        ModelHandle {
            hidden_dim: d,
            activation: act,
            blocks: vec![Block {
                w1: Slot::dense(SlotId::new(0, SlotKind::W1), w1, DType::F64),
                w2: Slot::dense(SlotId::new(0, SlotKind::W2), w2, DType::F64),
            }],
        }
    }

    #[test]
    fn zero_weights_pass_input_through() {
        let model = single_block(3, Mat::zeros(4, 3), Mat::zeros(3, 4), Activation::Identity);
        let sample = Mat::from_fn(5, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let batch = capture_samples(&model, &[sample]).unwrap();
        assert_eq!(batch.per_block_io[0].input, batch.per_block_io[0].output);
    }

    #[test]
    fn identity_weights_add_normalized_input() {
        let model = single_block(
            2,
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Activation::Identity,
        );
        let sample = Mat::from_row_slice(1, 2, &[3.0, 4.0]);
        let batch = capture_samples(&model, &[sample]).unwrap();
        // rms of (3, 4) is sqrt(12.5)
        let r = (12.5 + crate::model_io::model::RMS_EPS).sqrt();
        let x1 = batch.input(SlotId::new(0, SlotKind::W1)).unwrap();
        assert!((x1[(0, 0)] - 3.0 / r).abs() < 1e-15);
        assert!((x1[(1, 0)] - 4.0 / r).abs() < 1e-15);
        let out = &batch.per_block_io[0].output;
        assert!((out[(0, 0)] - (3.0 + 3.0 / r)).abs() < 1e-14);
        assert!((out[(1, 0)] - (4.0 + 4.0 / r)).abs() < 1e-14);
    }

    #[test]
    fn non_finite_forward_names_the_block() {
        let model = single_block(
            2,
            Mat::from_element(2, 2, f64::INFINITY),
            Mat::identity(2, 2),
            Activation::Identity,
        );
        let err = capture_samples(&model, &[Mat::from_element(1, 2, 1.0)]).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains("block 0")));
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let model = single_block(2, Mat::zeros(2, 2), Mat::zeros(2, 2), Activation::Relu);
        assert!(matches!(
            capture_samples(&model, &[Mat::zeros(1, 3)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gram_small_cases() {
        assert_eq!(gram_accumulate(&Mat::identity(2, 2)), Mat::identity(2, 2));
        let g = gram_accumulate(&Mat::from_column_slice(2, 1, &[1.0, 2.0]));
        assert_eq!(g, Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
    }

    #[test]
    fn dump_names() {
        let model = single_block(2, Mat::identity(3, 2), Mat::zeros(2, 3), Activation::Relu);
        let batch = capture_samples(&model, &[Mat::from_element(2, 2, 1.0)]).unwrap();
        let names: Vec<String> = batch.to_tensors().unwrap().into_keys().collect();
        assert_eq!(
            names,
            vec![
                "block.0.in",
                "block.0.out",
                "slot.blocks.0.w1.x",
                "slot.blocks.0.w2.x"
            ]
        );
    }
}
