//! Command-line front end: `synth`, `compress`, `importance`, `eval`.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for
//! numerical failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adacr::{build_plan, ImportanceMode};
use crate::calibration::{capture_activations, stack_of_batch, DEFAULT_BUCKETS};
use crate::error::{Error, Result};
use crate::linalg::DEFAULT_REL_DAMPING;
use crate::model_io::{
    container_path_for, gen_synthetic, load_model, save_compressed, Activation, CalibrationTensor,
    DType, ModelHandle, SynthConfig, MODEL_CONTAINER_FILE, MODEL_MANIFEST_FILE,
};
use crate::pipeline::{
    compress_with_activations, default_mrr, eval_compression, traces_csv, PipelineConfig,
    HOLDOUT_FRACTION,
};

pub const PLAN_FILE: &str = "plan.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CALIB_FILE: &str = "calib.st";

#[derive(Debug, Parser)]
#[command(
    name = "lowrank",
    version,
    about = "Low-rank weight compression with adaptive compensation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic model and calibration file.
    Synth(SynthArgs),
    /// Compress a model and write the compressed model, plan, traces and report.
    Compress(CompressArgs),
    /// Print the retention plan as JSON without compressing.
    Importance(ImportanceArgs),
    /// Compare a compressed model against its original.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    blocks: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 128)]
    mlp_dim: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value = "gelu", value_parser = parse_activation)]
    activation: Activation,
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    dtype: DType,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Tensor container; defaults to the manifest path with a `.st` extension.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Calibration container holding `samples` of shape [N, T, d].
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Fraction of parameters kept, in (0, 1].
    #[arg(long, value_parser = parse_unit_interval, conflicts_with = "compression_ratio")]
    target_retention: Option<f64>,
    /// Fraction of parameters removed, in [0, 1); the complement of --target-retention.
    #[arg(long, value_parser = parse_removed_fraction)]
    compression_ratio: Option<f64>,
    /// Minimum retention ratio; defaults to target - 0.1.
    #[arg(long, value_parser = parse_unit_interval)]
    mrr: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_BUCKETS)]
    bucket_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "one_minus_cos", value_parser = parse_mode)]
    importance_mode: ImportanceMode,
}

impl PlanArgs {
    fn target(&self) -> f64 {
        match (self.target_retention, self.compression_ratio) {
            (Some(r), _) => r,
            (None, Some(c)) => 1.0 - c,
            (None, None) => PipelineConfig::default().trr,
        }
    }
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    plan: PlanArgs,
    /// Alternating compensation rounds.
    #[arg(long, default_value_t = 1)]
    iters: usize,
    /// Whiten with the Cholesky factor of the input Gram matrix before truncation.
    #[arg(long)]
    whiten: bool,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_REL_DAMPING)]
    rel_damping: f64,
    /// Also write captured activations to this container.
    #[arg(long)]
    dump_activations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Compressed model manifest; its container is the sibling `.st` file.
    #[arg(long)]
    compressed: PathBuf,
    /// Evaluate on every calibration sample instead of the held-out tail.
    #[arg(long)]
    all_samples: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the range (0, 1]"))
    }
}

fn parse_removed_fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside the range [0, 1)"))
    }
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown activation {s:?}"))
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s.to_ascii_lowercase().as_str() {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("unknown dtype {s:?}")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<ImportanceMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load(args: &ModelArgs) -> Result<(ModelHandle, CalibrationTensor)> {
    let weights = args
        .weights
        .clone()
        .unwrap_or_else(|| container_path_for(&args.model));
    let model = load_model(&args.model, &weights)?;
    let calib = CalibrationTensor::read(&args.calib)?;
    if calib.is_empty() {
        return Err(Error::Config("calibration file holds no samples".into()));
    }
    Ok((model, calib))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pipeline_config(plan: &PlanArgs) -> PipelineConfig {
    let trr = plan.target();
    PipelineConfig {
        trr,
        mrr: plan.mrr.unwrap_or_else(|| default_mrr(trr)),
        bucket_size: plan.bucket_size,
        importance_mode: plan.importance_mode,
        seed: plan.seed,
        ..PipelineConfig::default()
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        blocks: args.blocks,
        hidden_dim: args.hidden_dim,
        mlp_dim: args.mlp_dim,
        n_samples: args.samples,
        tokens: args.tokens,
        activation: args.activation,
        dtype: args.dtype,
    };
    if [
        cfg.blocks,
        cfg.hidden_dim,
        cfg.mlp_dim,
        cfg.n_samples,
        cfg.tokens,
    ]
    .contains(&0)
    {
        return Err(Error::Config("synthetic sizes must be at least 1".into()));
    }
    let (model, calib) = gen_synthetic(&cfg);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    model.save(
        &args.out.join(MODEL_MANIFEST_FILE),
        &args.out.join(MODEL_CONTAINER_FILE),
    )?;
    calib.write(&args.out.join(CALIB_FILE), args.dtype)
}

fn compress(args: CompressArgs) -> Result<()> {
    let cfg = PipelineConfig {
        iterations: args.iters,
        whiten: args.whiten,
        rel_tol: args.rel_tol,
        rel_damping: args.rel_damping,
        ..pipeline_config(&args.plan)
    };
    cfg.validate()?;
    let (model, calib) = load(&args.model)?;
    let (fit, held_out) = calib.split_holdout(HOLDOUT_FRACTION);
    let bucketed = stack_of_batch(&fit, cfg.bucket_size, cfg.seed)?;
    let activations = capture_activations(&model, &bucketed)?;
    if let Some(path) = &args.dump_activations {
        activations.dump(path)?;
    }
    let out = compress_with_activations(&model, &activations, &cfg)?;

    let compressed = save_compressed(&model, &out.plan, &out.factors, &args.out)?;
    write_text(&args.out.join(PLAN_FILE), &out.plan.to_json()?)?;
    write_text(&args.out.join(TRACES_FILE), &traces_csv(&out.traces))?;
    if !held_out.is_empty() {
        let report = eval_compression(&model, &compressed, &held_out)?;
        write_text(&args.out.join(REPORT_FILE), &report.to_json()?)?;
    }
    Ok(())
}

fn importance(args: ImportanceArgs) -> Result<()> {
    let cfg = pipeline_config(&args.plan);
    cfg.validate()?;
    let (model, calib) = load(&args.model)?;
    let (fit, _) = calib.split_holdout(HOLDOUT_FRACTION);
    let bucketed = stack_of_batch(&fit, cfg.bucket_size, cfg.seed)?;
    let activations = capture_activations(&model, &bucketed)?;
    let plan = build_plan(&activations, &model, cfg.trr, cfg.mrr, cfg.importance_mode)?;
    print!("{}", plan.to_json()?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (model, calib) = load(&args.model)?;
    let compressed = load_model(&args.compressed, &container_path_for(&args.compressed))?;
    let samples = if args.all_samples {
        calib.samples.clone()
    } else {
        let (_, held) = calib.split_holdout(HOLDOUT_FRACTION);
        if held.is_empty() {
            calib.samples.clone()
        } else {
            held
        }
    };
    let report = eval_compression(&model, &compressed, &samples)?;
    let json = report.to_json()?;
    if let Some(path) = &args.out {
        write_text(path, &json)?;
    }
    print!("{json}");
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Compress(a) => compress(a),
        Command::Importance(a) => importance(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
