//! `adafuse` command-line driver.
//!
//! Exit codes: 0 ok, 1 data error, 2 config error, 3 training divergence,
//! 4 gradient check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adafuse::checkpoint::save_checkpoint;
use adafuse::config::RunConfig;
use adafuse::error::{exit, Error, Result};
use adafuse::export;
use adafuse::manifest::{load_manifest, save_manifest};
use adafuse::run::{grid_search_parallel, run_folds_parallel, sensitivity_parallel, thread_pool};
use adafuse_core::batch::ClipBatch;
use adafuse_core::folds::{make_folds, FoldPlan, FoldScheme};
use adafuse_core::fusion::{Ablation, M2P2Model};
use adafuse_core::gradcheck::{model_grad_check, GradCheckOptions};
use adafuse_core::search::Grid;
use adafuse_core::synth::{generate, PerModality, SynthConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "adafuse", version, about = "Adaptive multimodal fusion: training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset as a JSONL manifest
    Generate(GenerateArgs),
    /// Train and evaluate on every fold, writing reports, diagnostics and checkpoints
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients of the full model on a 4-clip batch
    Gradcheck(GradcheckArgs),
    /// Grid search over lr, gamma, alpha and beta
    Sweep(SweepArgs),
    /// Retrain with alpha, beta and gamma each perturbed by +-delta
    Sensitivity(SensitivityArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Synthetic-data config (JSON); defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output manifest path
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Rolling,
    CrossValidation,
}

/// Flags shared by commands that train; each overrides its config key.
#[derive(Args, Debug)]
struct RunArgs {
    /// Run config (JSON); unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSONL); overrides `data` in the config
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ablation variant: full, no_alignment, no_da_loss, equal_weights, unimodal_a, unimodal_v, unimodal_l
    #[arg(long)]
    ablation: Option<String>,
    /// Root seed
    #[arg(long)]
    seed: Option<u64>,
    /// Master epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of folds
    #[arg(long)]
    n_folds: Option<usize>,
    /// Fold scheme
    #[arg(long, value_enum)]
    fold_scheme: Option<SchemeArg>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory; overrides `out` in the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Run config (JSON); only model options are used, dropout is always off
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the random batch and the initial parameters
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Pass threshold on the maximum relative error
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Debug fault injection: scales every analytic gradient by 1.1
    #[arg(long)]
    corrupt_gradient: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Grid file: {"lr":[..],"gamma":[..],"alpha":[..],"beta":[..]}
    #[arg(long)]
    grid: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Relative perturbation
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(a) = &self.ablation {
            cfg.train.ablation = a.parse::<Ablation>().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(n) = self.n_folds {
            cfg.n_folds = n;
        }
        if let Some(s) = self.fold_scheme {
            cfg.fold_scheme = match s {
                SchemeArg::Rolling => FoldScheme::Rolling,
                SchemeArg::CrossValidation => FoldScheme::CrossValidation,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_plan(cfg: &RunConfig) -> Result<(adafuse_core::data::DatasetManifest, FoldPlan)> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `data` in the config".into()))?;
    let manifest = load_manifest(path)?;
    let plan = make_folds(&manifest, cfg.fold_scheme, cfg.n_folds)?;
    Ok((manifest, plan))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn generate_cmd(args: &GenerateArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = generate(&cfg)?;
    save_manifest(&manifest, &args.out)?;
    eprintln!("wrote {} clips in {} episodes to {}", manifest.clips.len(), manifest.episodes.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.run.resolve()?;
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out` in the config".into()))?;
    let (manifest, plan) = load_plan(&cfg)?;
    let pool = thread_pool()?;
    let (report, models) = pool.install(|| run_folds_parallel(&manifest, &plan, &cfg.train))?;
    create_dir(&out)?;
    write_json(&out.join(export::CONFIG_JSON), &cfg.to_json())?;
    export::write_run(&report, &out)?;
    for (i, model) in models.iter().enumerate() {
        save_checkpoint(model, out.join(format!("fold_{i}.ckpt")))?;
    }
    for f in &report.folds {
        println!(
            "fold {} test {}: metric {:.6} w ({:.4}, {:.4}, {:.4})",
            f.fold,
            f.test_episodes.join(","),
            f.metric,
            f.weights[0],
            f.weights[1],
            f.weights[2]
        );
    }
    println!("mean {:.6} over {} folds", report.mean, report.folds.len());
    Ok(())
}

/// Returns whether the check passed.
fn gradcheck_cmd(args: &GradcheckArgs) -> Result<bool> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let data = generate(&SynthConfig {
        n_episodes: 1,
        clips_per_episode: 4,
        seq_len: PerModality::splat([2, 6]),
        seed: args.seed,
        ..SynthConfig::default()
    })?;
    let model = M2P2Model::new(cfg.train.model_config(data.task, data.dims), &mut ChaCha8Rng::seed_from_u64(args.seed));
    let clips: Vec<_> = data.clips.iter().collect();
    let batch = ClipBatch::new(data.task, &clips)?;
    let mut opts = GradCheckOptions::new(args.eps, args.tol);
    if args.corrupt_gradient {
        opts.corrupt = Some(0.1);
    }
    let r = model_grad_check(&model, &batch, [1.0 / 3.0; 3], cfg.train.gamma, opts)?;
    println!(
        "checked {} entries ({} skipped at kinks), max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        r.checked, r.skipped, r.max_rel_err, r.worst_param, r.analytic, r.numeric
    );
    if !r.passed {
        eprintln!("gradient check failed: worst parameter {}", r.worst_param);
    }
    Ok(r.passed)
}

fn csv_out(path: Option<&Path>, f: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => export::to_file(p, |w| f(w)),
        None => f(&mut std::io::stdout().lock()),
    }
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&args.grid).map_err(|e| Error::Config(format!("{}: {e}", args.grid.display())))?;
    let grid: Grid = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    grid.validate()?;
    let cfg = args.run.resolve()?;
    let (manifest, plan) = load_plan(&cfg)?;
    let result = thread_pool()?.install(|| grid_search_parallel(&manifest, &plan, &cfg.train, &grid))?;
    csv_out(args.out.as_deref(), |w| export::write_grid(&result, w))?;
    let b = result.best;
    eprintln!("best: lr {} gamma {} alpha {} beta {}", b.lr, b.gamma, b.alpha, b.beta);
    Ok(())
}

fn sensitivity_cmd(args: &SensitivityArgs) -> Result<()> {
    let cfg = args.run.resolve()?;
    let (manifest, plan) = load_plan(&cfg)?;
    let report = thread_pool()?.install(|| sensitivity_parallel(&manifest, &plan, &cfg.train, args.delta))?;
    csv_out(args.out.as_deref(), |w| export::write_sensitivity(&report, w))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate_cmd(a).map(|_| exit::OK),
        Command::Train(a) => train_cmd(a).map(|_| exit::OK),
        Command::Gradcheck(a) => gradcheck_cmd(a).map(|ok| if ok { exit::OK } else { exit::GRADCHECK }),
        Command::Sweep(a) => sweep_cmd(a).map(|_| exit::OK),
        Command::Sensitivity(a) => sensitivity_cmd(a).map(|_| exit::OK),
    };
    let code = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
