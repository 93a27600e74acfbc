//! Seeded comparison of the full pipeline against two baselines on
//! synthetic models: uniform plain truncated SVD, and compensation with
//! uniform ratios. Prints held-out output MSE win counts.
//!
//! cargo run --release --example dominance -- [seeds] [trr] [mrr]

use lowrank::adacr::ImportanceMode;
use lowrank::calibration::{capture_activations, stack_of_batch};
use lowrank::model_io::{gen_synthetic, SynthConfig};
use lowrank::pipeline::{
    compress_with_activations, forward_samples, output_mse_against, PipelineConfig,
    HOLDOUT_FRACTION,
};

fn main() -> lowrank::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let trr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.6);
    let mrr: f64 = args
        .get(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(trr - 0.1);

    let mut wins = [0usize; 3];
    let mut ratios = [0.0f64; 3];
    for seed in 0..seeds {
        let (model, calib) = gen_synthetic(&SynthConfig {
            seed,
            ..SynthConfig::default()
        });
        let (fit, held) = calib.split_holdout(HOLDOUT_FRACTION);
        let base = PipelineConfig {
            trr,
            mrr,
            seed,
            ..PipelineConfig::default()
        };
        let bucketed = stack_of_batch(&fit, base.bucket_size, seed)?;
        let acts = capture_activations(&model, &bucketed)?;
        let reference = forward_samples(&model, &held)?;

        let run = |cfg: PipelineConfig| -> lowrank::Result<f64> {
            let out = compress_with_activations(&model, &acts, &cfg)?;
            output_mse_against(&reference, &out.model, &held)
        };
        let full = run(base.clone())?;
        let raw_cos = run(PipelineConfig {
            importance_mode: ImportanceMode::Cos,
            ..base.clone()
        })?;
        let vanilla = run(PipelineConfig {
            mrr: trr,
            iterations: 0,
            whiten: false,
            ..base.clone()
        })?;
        let comp_only = run(PipelineConfig {
            mrr: trr,
            ..base.clone()
        })?;

        wins[0] += (full < vanilla) as usize;
        wins[1] += (full < comp_only) as usize;
        wins[2] += (raw_cos < comp_only) as usize;
        ratios[0] += full / vanilla;
        ratios[1] += full / comp_only;
        ratios[2] += raw_cos / comp_only;
    }
    let n = seeds as f64;
    println!(
        "full < vanilla        : {}/{seeds} (mean ratio {:.4})",
        wins[0],
        ratios[0] / n
    );
    println!(
        "full < comp-only      : {}/{seeds} (mean ratio {:.4})",
        wins[1],
        ratios[1] / n
    );
    println!(
        "cos-mode < comp-only   : {}/{seeds} (mean ratio {:.4})",
        wins[2],
        ratios[2] / n
    );
    Ok(())
}
