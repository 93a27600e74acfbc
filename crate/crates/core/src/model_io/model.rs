use std::collections::BTreeMap;
use std::path::Path;

use super::container::{self, DType, TensorBlob, TensorMap};
use super::manifest::{
    Activation, BlockKind, BlockSpec, LowRankEntry, ModelManifest, SlotId, SlotKind,
    MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::linalg::{LowRankPair, Mat};

/// Epsilon inside the pre-activation RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum SlotWeights {
    Dense(Mat),
    LowRank(LowRankPair),
}

impl SlotWeights {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            SlotWeights::Dense(w) => w.shape(),
            SlotWeights::LowRank(p) => (p.nrows(), p.ncols()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            SlotWeights::Dense(w) => w.len(),
            SlotWeights::LowRank(p) => p.param_count(),
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        match self {
            SlotWeights::Dense(w) => w * x,
            SlotWeights::LowRank(p) => p.apply(x),
        }
    }

    /// Dense view of the slot (materializes the product for low-rank slots).
    pub fn to_dense(&self) -> Mat {
        match self {
            SlotWeights::Dense(w) => w.clone(),
            SlotWeights::LowRank(p) => p.product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TensorNames {
    Dense(String),
    LowRank { u: String, vt: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub weights: SlotWeights,
    /// Storage precision; working copies are always f64.
    pub dtype: DType,
    names: TensorNames,
}

impl Slot {
    pub fn dense(id: SlotId, w: Mat, dtype: DType) -> Self {
        Self {
            weights: SlotWeights::Dense(w),
            dtype,
            names: TensorNames::Dense(id.to_string()),
        }
    }

    pub fn low_rank(id: SlotId, pair: LowRankPair, dtype: DType) -> Self {
        Self {
            weights: SlotWeights::LowRank(pair),
            dtype,
            names: TensorNames::LowRank {
                u: format!("{id}.u"),
                vt: format!("{id}.vt"),
            },
        }
    }
}

/// Hidden states produced inside one residual block.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// Column-wise RMS-normalized block input, the operand of `w1`.
    pub normed: Mat,
    /// `act(w1 * normed)`, the operand of `w2`.
    pub hidden: Mat,
    /// `x + w2 * hidden`.
    pub output: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub w1: Slot,
    pub w2: Slot,
}

impl Block {
    pub fn slot(&self, kind: SlotKind) -> &Slot {
        match kind {
            SlotKind::W1 => &self.w1,
            SlotKind::W2 => &self.w2,
        }
    }

    fn slot_mut(&mut self, kind: SlotKind) -> &mut Slot {
        match kind {
            SlotKind::W1 => &mut self.w1,
            SlotKind::W2 => &mut self.w2,
        }
    }

    pub fn forward_traced(&self, x: &Mat, act: Activation) -> BlockTrace {
        let normed = rms_normalize(x);
        let hidden = self.w1.weights.apply(&normed).map(|v| act.apply(v));
        let output = x + self.w2.weights.apply(&hidden);
        BlockTrace {
            normed,
            hidden,
            output,
        }
    }
}

/// Divides each column by `sqrt(mean(col^2) + RMS_EPS)`.
pub fn rms_normalize(x: &Mat) -> Mat {
    let mut out = x.clone();
    let d = x.nrows().max(1) as f64;
    for mut col in out.column_iter_mut() {
        let ms = col.norm_squared() / d;
        col.scale_mut(1.0 / (ms + RMS_EPS).sqrt());
    }
    out
}

/// A loaded model. Immutable once built; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHandle {
    pub hidden_dim: usize,
    pub activation: Activation,
    pub blocks: Vec<Block>,
}

impl ModelHandle {
    pub fn slot_ids(&self) -> impl Iterator<Item = SlotId> + '_ {
        (0..self.blocks.len())
            .flat_map(|b| SlotKind::ALL.into_iter().map(move |k| SlotId::new(b, k)))
    }

    pub fn slot(&self, id: SlotId) -> Result<&Slot> {
        self.blocks
            .get(id.block)
            .map(|b| b.slot(id.kind))
            .ok_or_else(|| Error::ManifestMismatch(format!("no slot {id}")))
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.w1.weights.param_count() + b.w2.weights.param_count())
            .sum()
    }

    /// Parameters the model would hold with every slot dense.
    pub fn dense_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                let (m1, n1) = b.w1.weights.shape();
                let (m2, n2) = b.w2.weights.shape();
                m1 * n1 + m2 * n2
            })
            .sum()
    }

    /// Runs every block over `x` (`hidden_dim x tokens`).
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        if x.nrows() != self.hidden_dim {
            return Err(Error::Shape(format!(
                "input has {} rows, model hidden_dim is {}",
                x.nrows(),
                self.hidden_dim
            )));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_traced(&h, self.activation).output;
        }
        Ok(h)
    }

    /// Copy of the model with the given slots replaced by low-rank pairs.
    pub fn with_factors(&self, factors: &BTreeMap<SlotId, LowRankPair>) -> Result<Self> {
        let mut out = self.clone();
        for (id, pair) in factors {
            let slot = out
                .blocks
                .get_mut(id.block)
                .map(|b| b.slot_mut(id.kind))
                .ok_or_else(|| Error::ManifestMismatch(format!("no slot {id}")))?;
            let (m, n) = slot.weights.shape();
            if (pair.nrows(), pair.ncols()) != (m, n) {
                return Err(Error::Shape(format!(
                    "{id}: factors give {}x{}, slot is {m}x{n}",
                    pair.nrows(),
                    pair.ncols()
                )));
            }
            *slot = Slot::low_rank(*id, pair.clone(), slot.dtype);
        }
        Ok(out)
    }

    pub fn to_manifest_and_tensors(&self) -> Result<(ModelManifest, TensorMap)> {
        let mut tensors = TensorMap::new();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let mut spec = BlockSpec {
                block_id: i,
                kind: BlockKind::ResidualMlp,
                matrices: BTreeMap::new(),
                lowrank: None,
            };
            for kind in SlotKind::ALL {
                let slot = block.slot(kind);
                match (&slot.weights, &slot.names) {
                    (SlotWeights::Dense(w), TensorNames::Dense(name)) => {
                        tensors.insert(name.clone(), blob(slot.dtype, w)?);
                        spec.matrices.insert(kind, name.clone());
                    }
                    (SlotWeights::LowRank(p), TensorNames::LowRank { u, vt }) => {
                        tensors.insert(u.clone(), blob(slot.dtype, &p.u_sigma)?);
                        tensors.insert(vt.clone(), blob(slot.dtype, &p.vt_sigma)?);
                        spec.lowrank.get_or_insert_with(BTreeMap::new).insert(
                            kind,
                            LowRankEntry {
                                u: u.clone(),
                                vt: vt.clone(),
                                rank: p.rank(),
                            },
                        );
                    }
                    _ => unreachable!("slot names always track the weight variant"),
                }
            }
            blocks.push(spec);
        }
        let manifest = ModelManifest {
            version: MANIFEST_VERSION.to_string(),
            hidden_dim: self.hidden_dim,
            activation: self.activation,
            blocks,
        };
        Ok((manifest, tensors))
    }

    pub fn save(&self, manifest_path: &Path, container_path: &Path) -> Result<()> {
        let (manifest, tensors) = self.to_manifest_and_tensors()?;
        container::write(container_path, &tensors)?;
        manifest.write(manifest_path)
    }

    pub fn from_manifest_and_tensors(
        manifest: &ModelManifest,
        tensors: &TensorMap,
    ) -> Result<Self> {
        let d = manifest.hidden_dim;
        if d == 0 {
            return Err(Error::ManifestMismatch(
                "hidden_dim must be positive".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(manifest.blocks.len());
        for (i, spec) in manifest.blocks.iter().enumerate() {
            if spec.block_id != i {
                return Err(Error::ManifestMismatch(format!(
                    "block at position {i} has block_id {}",
                    spec.block_id
                )));
            }
            let w1 = load_slot(spec, SlotId::new(i, SlotKind::W1), tensors)?;
            let w2 = load_slot(spec, SlotId::new(i, SlotKind::W2), tensors)?;
            let (h, d1) = w1.weights.shape();
            let (d2, h2) = w2.weights.shape();
            if d1 != d || d2 != d || h2 != h {
                return Err(Error::Shape(format!(
                    "block {i}: w1 is {h}x{d1} and w2 is {d2}x{h2}; expected hx{d} and {d}xh"
                )));
            }
            blocks.push(Block { w1, w2 });
        }
        Ok(Self {
            hidden_dim: d,
            activation: manifest.activation,
            blocks,
        })
    }
}

fn blob(dtype: DType, m: &Mat) -> Result<TensorBlob> {
    // nalgebra is column-major; the container is row-major.
    let row_major: Vec<f64> = m.transpose().iter().copied().collect();
    TensorBlob::from_f64(dtype, vec![m.nrows(), m.ncols()], &row_major)
}

fn matrix(name: &str, tensors: &TensorMap) -> Result<(Mat, DType)> {
    let t = tensors.get(name).ok_or_else(|| {
        Error::ManifestMismatch(format!("tensor {name:?} not found in container"))
    })?;
    if t.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "tensor {name:?} has shape {:?}; weight matrices are rank 2",
            t.shape
        )));
    }
    let (m, n) = (t.shape[0], t.shape[1]);
    if m == 0 || n == 0 {
        return Err(Error::Shape(format!(
            "tensor {name:?} has an empty dimension"
        )));
    }
    Ok((Mat::from_row_slice(m, n, &t.to_f64()), t.dtype))
}

fn load_slot(spec: &BlockSpec, id: SlotId, tensors: &TensorMap) -> Result<Slot> {
    let dense = spec.matrices.get(&id.kind);
    let low = spec.lowrank.as_ref().and_then(|l| l.get(&id.kind));
    match (dense, low) {
        (Some(name), None) => {
            let (w, dtype) = matrix(name, tensors)?;
            Ok(Slot {
                weights: SlotWeights::Dense(w),
                dtype,
                names: TensorNames::Dense(name.clone()),
            })
        }
        (None, Some(entry)) => {
            let (u, dtype) = matrix(&entry.u, tensors)?;
            let (vt, _) = matrix(&entry.vt, tensors)?;
            if u.ncols() != entry.rank || vt.nrows() != entry.rank {
                return Err(Error::Shape(format!(
                    "{id}: declared rank {} but factors are {}x{} and {}x{}",
                    entry.rank,
                    u.nrows(),
                    u.ncols(),
                    vt.nrows(),
                    vt.ncols()
                )));
            }
            let pair = LowRankPair::new(u, vt).map_err(|e| e.context(&id.to_string()))?;
            Ok(Slot {
                weights: SlotWeights::LowRank(pair),
                dtype,
                names: TensorNames::LowRank {
                    u: entry.u.clone(),
                    vt: entry.vt.clone(),
                },
            })
        }
        (None, None) => Err(Error::ManifestMismatch(format!("{id} has no weights"))),
        (Some(_), Some(_)) => Err(Error::ManifestMismatch(format!(
            "{id} is declared both dense and low-rank"
        ))),
    }
}

pub fn load_model(manifest_path: &Path, container_path: &Path) -> Result<ModelHandle> {
    let manifest = ModelManifest::read(manifest_path)?;
    let tensors = container::read(container_path)?;
    ModelHandle::from_manifest_and_tensors(&manifest, &tensors)
}

/// Calibration samples, each `tokens x hidden_dim` (one row per token).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTensor {
    pub samples: Vec<Mat>,
}

pub const CALIBRATION_TENSOR: &str = "samples";

impl CalibrationTensor {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.samples.first().map_or(0, |s| s.nrows())
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.ncols())
    }

    /// Splits into (fit, held-out), reserving the trailing `fraction` of samples.
    pub fn split_holdout(&self, fraction: f64) -> (Vec<Mat>, Vec<Mat>) {
        let n = self.samples.len();
        let mut held = (n as f64 * fraction).floor() as usize;
        if held >= n {
            held = n.saturating_sub(1);
        }
        let (fit, eval) = self.samples.split_at(n - held);
        (fit.to_vec(), eval.to_vec())
    }

    pub fn to_tensors(&self, dtype: DType) -> Result<TensorMap> {
        let (t, d) = (self.tokens(), self.dim());
        let mut values = Vec::with_capacity(self.samples.len() * t * d);
        for s in &self.samples {
            if s.shape() != (t, d) {
                return Err(Error::Shape("calibration samples differ in shape".into()));
            }
            values.extend(s.transpose().iter().copied());
        }
        let blob = TensorBlob::from_f64(dtype, vec![self.samples.len(), t, d], &values)?;
        Ok([(CALIBRATION_TENSOR.to_string(), blob)].into())
    }

    pub fn from_tensors(tensors: &TensorMap) -> Result<Self> {
        let t = tensors.get(CALIBRATION_TENSOR).ok_or_else(|| {
            Error::ManifestMismatch(format!("calibration tensor {CALIBRATION_TENSOR:?} missing"))
        })?;
        let [n, tok, d] = t.shape[..] else {
            return Err(Error::Shape(format!(
                "calibration tensor must be [N, T, d], got {:?}",
                t.shape
            )));
        };
        let values = t.to_f64();
        let samples = values
            .chunks_exact((tok * d).max(1))
            .take(n)
            .map(|c| Mat::from_row_slice(tok, d, c))
            .collect();
        Ok(Self { samples })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tensors(&container::read(path)?)
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        container::write(path, &self.to_tensors(dtype)?)
    }
}
