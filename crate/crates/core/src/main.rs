use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mixprune::allocator::{allocate, default_clips, AllocatorKind, LayerSensitivity};
use mixprune::fixture::{gen_fixture, parse_layer_shapes, DEFAULT_SAMPLES_PER_DIM};
use mixprune::pipeline::{eval_model, prepare_layers, run_pipeline, sensitivities, NmPattern, PruneConfig};
use mixprune::{Criterion, Error, ModelManifest, PruneMethod, Result, Scope, TensorContainer, THREADS_ENV};

fn parse<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Parser)]
#[command(name = "mixprune", version, about = "Hessian-aware post-training pruning with mixed per-layer sparsity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune every layer of a model and write the pruned container and report.
    Prune(PruneArgs),
    /// Score per-layer sensitivity and print it as JSON.
    Sensitivity(SensitivityArgs),
    /// Turn sensitivities into a per-layer sparsity plan.
    Allocate(AllocateArgs),
    /// Per-layer output error between two models on the calibration inputs.
    Eval(EvalArgs),
    /// Generate a synthetic model, calibration set and manifest.
    GenFixture(FixtureArgs),
}

#[derive(Args)]
struct ModelInputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    calib: PathBuf,
}

impl ModelInputs {
    fn load(&self) -> Result<(TensorContainer, ModelManifest, TensorContainer)> {
        Ok((
            TensorContainer::read_file(&self.model)?,
            ModelManifest::read_file(&self.manifest)?,
            TensorContainer::read_file(&self.calib)?,
        ))
    }
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value = "obs", value_parser = parse::<Criterion>)]
    criterion: Criterion,
    #[arg(long, default_value = "inverse", value_parser = parse::<AllocatorKind>)]
    allocator: AllocatorKind,
    #[arg(long, default_value = "per-row", value_parser = parse::<Scope>)]
    scope: Scope,
    /// Reconstruction method; `--block` implies `blocked`.
    #[arg(long, default_value = "closed-form", value_parser = parse::<PruneMethod>)]
    method: PruneMethod,
    #[arg(long, default_value_t = mixprune::calibration::DEFAULT_DAMP_PERCENT)]
    damp: f64,
    #[arg(long, value_parser = parse::<NmPattern>)]
    nm: Option<NmPattern>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    pmin: Option<f64>,
    #[arg(long)]
    pmax: Option<f64>,
    /// Sparsity at which sensitivity is measured (defaults to --sparsity).
    #[arg(long)]
    probe: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SensitivityArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    #[arg(long, default_value = "obs", value_parser = parse::<Criterion>)]
    criterion: Criterion,
    #[arg(long, default_value_t = mixprune::calibration::DEFAULT_DAMP_PERCENT)]
    damp: f64,
    #[arg(long, default_value_t = 0.5)]
    probe: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    /// JSON array of {layer, score, param_count}.
    #[arg(long)]
    sensitivities: PathBuf,
    #[arg(long)]
    sparsity: f64,
    #[arg(long)]
    pmin: Option<f64>,
    #[arg(long)]
    pmax: Option<f64>,
    #[arg(long, default_value = "inverse", value_parser = parse::<AllocatorKind>)]
    allocator: AllocatorKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference (dense) model.
    #[arg(long)]
    model: PathBuf,
    /// Model to compare against the reference.
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated weight shapes, ROWSxCOLS (d_out x d_in).
    #[arg(long, default_value = "8x16,16x16,16x8")]
    layers: String,
    #[arg(long, default_value_t = 0.0)]
    hetero: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_DIM)]
    samples_per_dim: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

fn emit(json: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, format!("{json}\n"))?,
        None => writeln!(std::io::stdout().lock(), "{json}")?,
    }
    Ok(())
}

fn prune(a: PruneArgs) -> Result<()> {
    let (model, manifest, calib) = a.inputs.load()?;
    let method = if a.block.is_some() { PruneMethod::Blocked } else { a.method };
    let cfg = PruneConfig {
        sparsity: a.sparsity,
        criterion: a.criterion,
        allocator: a.allocator,
        scope: a.scope,
        method,
        damp: a.damp,
        block: a.block,
        nm: a.nm,
        p_min: a.pmin,
        p_max: a.pmax,
        probe: a.probe,
        seed: a.seed,
    };
    let (pruned, report) = run_pipeline(&cfg, &model, &manifest, &calib)?;
    pruned.write_file(&a.out)?;
    fs::write(&a.report, format!("{}\n", report.to_json()))?;
    eprintln!(
        "pruned {} layers to {:.4} sparsity, total reconstruction error {:.6e}",
        report.layers.len(),
        report.global.sparsity,
        report.global.total_recon_error
    );
    Ok(())
}

fn sensitivity(a: SensitivityArgs) -> Result<()> {
    let (model, manifest, calib) = a.inputs.load()?;
    let prepared = prepare_layers(&manifest, &model, &calib, a.criterion, a.damp)?;
    let sens = sensitivities(&prepared, a.probe)?;
    emit(&serde_json::to_string_pretty(&sens)?, a.out.as_deref())
}

fn allocate_cmd(a: AllocateArgs) -> Result<()> {
    let sens: Vec<LayerSensitivity> = serde_json::from_str(&fs::read_to_string(&a.sensitivities)?)?;
    let (lo, hi) = default_clips(a.sparsity);
    let plan = allocate(
        a.allocator,
        &sens,
        a.sparsity,
        a.pmin.unwrap_or(lo),
        a.pmax.unwrap_or(hi),
    )?;
    emit(&serde_json::to_string_pretty(&plan)?, a.out.as_deref())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dense = TensorContainer::read_file(&a.model)?;
    let pruned = TensorContainer::read_file(&a.pruned)?;
    let manifest = ModelManifest::read_file(&a.manifest)?;
    let calib = TensorContainer::read_file(&a.calib)?;
    let report = eval_model(&dense, &pruned, &manifest, &calib)?;
    emit(&serde_json::to_string_pretty(&report)?, a.out.as_deref())
}

fn fixture(a: FixtureArgs) -> Result<()> {
    let shapes = parse_layer_shapes(&a.layers)?;
    let f = gen_fixture(a.seed, &shapes, a.hetero, a.samples_per_dim)?;
    fs::create_dir_all(&a.out_dir)?;
    f.model.write_file(a.out_dir.join("model.mxpt"))?;
    f.calib.write_file(a.out_dir.join("calib.mxpt"))?;
    fs::write(a.out_dir.join("manifest.json"), format!("{}\n", f.manifest.to_json()))?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Prune(a) => prune(a),
        Command::Sensitivity(a) => sensitivity(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Eval(a) => eval(a),
        Command::GenFixture(a) => fixture(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
