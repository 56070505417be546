use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dipvae::data::{generate_dataset, load_cache, save_cache, Dataset, FactorGrid};
use dipvae::metrics::{evaluate, LatentCodes};
use dipvae::models::ModelParams;
use dipvae::objectives::ObjectiveKind;
use dipvae::trainer::{self, ConfigOverrides, SweepSpec, TrainConfig, TrainOptions};
use dipvae::traverse::traverse;

/// Split seed used when the shapes grid is generated on the fly.
const DEFAULT_SPLIT_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "dipvae", version, about = "Disentangled VAEs on procedural 2D shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the shapes grid and write a dataset cache.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint: SAP, Z-diff, reconstruction error, covariance.
    Eval(EvalArgs),
    /// Train one model per regularizer value.
    Sweep(SweepArgs),
    /// Decode latent traversals of one example into a PGM strip.
    Traverse(TraverseArgs),
    /// Write test-split posterior means and factors as CSV.
    ExportLatents(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Split seed.
    #[arg(long, default_value_t = DEFAULT_SPLIT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Use the 737,280-image grid instead of the desk-scale one.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    n_x: Option<usize>,
    #[arg(long)]
    n_y: Option<usize>,
    #[arg(long)]
    n_scale: Option<usize>,
    #[arg(long)]
    n_rotation: Option<usize>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset cache; the default grid is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda_od: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long = "lambda-3")]
    lambda_3: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[command(flatten)]
    data: DataArg,
}

impl TrainFlags {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg = TrainConfig::from_file(path)?;
        }
        cfg.apply(&ConfigOverrides {
            objective: self.objective,
            beta: self.beta,
            lambda_od: self.lambda_od,
            lambda_d: self.lambda_d,
            lambda_3: self.lambda_3,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            latent_dim: self.latent_dim,
            ..Default::default()
        })?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Run-record CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trainer checkpoint written at each evaluation and at the end.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps (the checkpoint allows resuming).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
    /// Seed for Z-diff pair sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated β (β-VAE) or λ_od (DIP-VAE) values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// λ_d = ratio · λ_od; defaults to 10 for dip-vae-i and 1 for dip-vae-ii.
    #[arg(long)]
    lambda_d_ratio: Option<f64>,
    /// Per-run checkpoints, suffixed with the run index.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
    /// Dataset index of the example to encode.
    #[arg(long, default_value_t = 0)]
    example: usize,
    /// Latent to sweep; all latents (one strip each) when omitted.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long, default_value_t = 3.0)]
    range: f64,
    #[arg(long, default_value_t = 11)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    out: PathBuf,
}

fn load_data(arg: &DataArg) -> Result<Dataset> {
    match &arg.data {
        Some(path) => Ok(load_cache(path)?),
        None => Ok(generate_dataset(&FactorGrid::default(), DEFAULT_SPLIT_SEED)?),
    }
}

fn load_model(path: &Path, ds: &Dataset) -> Result<ModelParams> {
    let model = ModelParams::load(path)?;
    if model.spec.input_dim() != ds.grid.pixels() {
        bail!(
            "checkpoint expects {} pixels, dataset has {}",
            model.spec.input_dim(),
            ds.grid.pixels()
        );
    }
    Ok(model)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut grid = if a.full { FactorGrid::full_size() } else { FactorGrid::default() };
    grid.canvas = a.canvas.unwrap_or(grid.canvas);
    grid.n_x = a.n_x.unwrap_or(grid.n_x);
    grid.n_y = a.n_y.unwrap_or(grid.n_y);
    grid.n_scale = a.n_scale.unwrap_or(grid.n_scale);
    grid.n_rotation = a.n_rotation.unwrap_or(grid.n_rotation);
    grid.validate()?;
    let ds = generate_dataset(&grid, a.seed)?;
    save_cache(&ds, &a.out)?;
    log::info!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.flags.config()?;
    if a.out.is_some() {
        cfg.record_path = a.out;
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint_path = a.checkpoint;
    }
    if a.stop_after.is_some() && cfg.checkpoint_path.is_none() {
        bail!("--stop-after needs a checkpoint path to resume from");
    }
    if let Some(r) = &a.resume {
        if !r.exists() {
            bail!("resume checkpoint {} does not exist", r.display());
        }
    }
    let ds = load_data(&a.flags.data)?;
    let out = trainer::train_with(
        &cfg,
        &ds,
        &TrainOptions {
            resume: a.resume,
            stop_after: a.stop_after,
        },
    )?;
    if let Some(r) = out.records.last() {
        println!(
            "step {} sap {:.4} zdiff {:.2} recon_error {:.6} offdiag_norm {:.4}",
            r.step, r.sap, r.zdiff, r.recon_error, r.offdiag_norm
        );
    } else {
        println!("stopped at step {}/{}", out.steps, out.total_steps);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.checkpoint, &ds)?;
    let r = evaluate(&model, &ds, &Default::default(), a.seed)?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(["sap", "zdiff", "recon_error", "offdiag_norm", "active_dims"])?;
    w.write_record([
        r.sap.to_string(),
        r.zdiff.to_string(),
        r.recon_error.to_string(),
        r.offdiag_norm.to_string(),
        r.active_dims.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut base = a.flags.config()?;
    base.checkpoint_path = a.checkpoint;
    let kind = a.flags.objective.unwrap_or(base.objective.kind);
    let mut spec = SweepSpec::new(kind, a.values);
    if let Some(r) = a.lambda_d_ratio {
        spec.lambda_d_ratio = r;
    }
    spec.lambda_3 = base.objective.lambda_3;
    spec.validate()?;
    let ds = load_data(&a.flags.data)?;
    let rows = trainer::sweep(&spec, &base, &ds)?;
    trainer::write_sweep_csv(&rows, &a.out)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed", rows.len());
    }
    Ok(())
}

fn traverse_cmd(a: TraverseArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.checkpoint, &ds)?;
    if a.example >= ds.len() {
        bail!("example {} out of range for {} images", a.example, ds.len());
    }
    let image: Vec<f64> = ds.image(a.example).iter().map(|&b| b as f64).collect();
    let img = traverse(&model, &image, ds.grid.canvas, a.latent, a.range, a.steps)?;
    img.save_pgm(&a.out)?;
    Ok(())
}

fn export_latents(a: ExportArgs) -> Result<()> {
    let ds = load_data(&a.data)?;
    let model = load_model(&a.checkpoint, &ds)?;
    LatentCodes::from_model(&model, &ds)?.write_csv(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Traverse(a) => traverse_cmd(a),
        Command::ExportLatents(a) => export_latents(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
