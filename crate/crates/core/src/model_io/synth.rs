//! Seeded synthetic residual-MLP models and matching calibration data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::container::DType;
use super::manifest::{Activation, SlotId, SlotKind};
use super::model::{Block, CalibrationTensor, ModelHandle, Slot, SlotWeights};
use crate::linalg::Mat;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub blocks: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub n_samples: usize,
    pub tokens: usize,
    pub activation: Activation,
    pub dtype: DType,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 8,
            hidden_dim: 64,
            mlp_dim: 128,
            n_samples: 64,
            tokens: 64,
            activation: Activation::Gelu,
            dtype: DType::F64,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        rng.sample::<f64, _>(StandardNormal) * scale
    })
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = gaussian(rng, n, n, 1.0);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Zero-mean Gaussian weights scaled by `1/sqrt(fan_in)`, multiplied by a
/// per-block residual-branch gain. Gains vary across depth so blocks differ
/// in how strongly they rewrite the hidden state.
///
/// Calibration tokens are anisotropic: a random rotation of coordinates with
/// geometrically decaying scales plus a per-sample offset.
pub fn gen_synthetic(cfg: &SynthConfig) -> (ModelHandle, CalibrationTensor) {
    assert!(
        cfg.blocks >= 1
            && cfg.hidden_dim >= 1
            && cfg.mlp_dim >= 1
            && cfg.n_samples >= 1
            && cfg.tokens >= 1,
        "synthetic sizes must be at least 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, h) = (cfg.hidden_dim, cfg.mlp_dim);

    let blocks = (0..cfg.blocks)
        .map(|b| {
            let gain = 2f64.powf(rng.random_range(-2.0..1.0));
            let w1 = gaussian(&mut rng, h, d, 1.0 / (d as f64).sqrt());
            let w2 = gaussian(&mut rng, d, h, gain / (h as f64).sqrt());
            Block {
                w1: Slot::dense(SlotId::new(b, SlotKind::W1), w1, cfg.dtype),
                w2: Slot::dense(SlotId::new(b, SlotKind::W2), w2, cfg.dtype),
            }
        })
        .collect();
    let mut model = ModelHandle {
        hidden_dim: d,
        activation: cfg.activation,
        blocks,
    };
    if cfg.dtype == DType::F32 {
        // Keep working copies equal to what storage will hold.
        for b in &mut model.blocks {
            for slot in [&mut b.w1, &mut b.w2] {
                if let SlotWeights::Dense(w) = &mut slot.weights {
                    w.apply(|v| *v = *v as f32 as f64);
                }
            }
        }
    }

    let rotation = orthogonal(&mut rng, d);
    let decay = 0.05f64.powf(1.0 / d.max(2).saturating_sub(1) as f64);
    let scales: Vec<f64> = (0..d).map(|j| decay.powi(j as i32)).collect();
    let samples = (0..cfg.n_samples)
        .map(|_| {
            let offset = gaussian(&mut rng, 1, d, 0.3);
            let mut z = gaussian(&mut rng, cfg.tokens, d, 1.0);
            for (j, s) in scales.iter().enumerate() {
                z.column_mut(j).scale_mut(*s);
            }
            let mut x = z * rotation.transpose();
            for mut row in x.row_iter_mut() {
                row += &offset;
            }
            x
        })
        .collect();
    (model, CalibrationTensor { samples })
}
