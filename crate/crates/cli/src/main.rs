use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pcpmae::experiments::{
    model_info, run_ablation, run_finetune, run_leakage, run_pretrain, run_reconstruct, Grid,
    MetricRow,
};
use pcpmae::geometry::read_xyz;
use pcpmae::model::{ModelConfig, TargetMode};
use pcpmae::training::{Checkpoint, FinetuneConfig, PcLoss, RunConfig};

const SEED_ENV: &str = "PCPMAE_SEED";

#[derive(Parser)]
#[command(
    name = "pcpmae",
    version,
    about = "Masked point-cloud autoencoder with center prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on the synthetic shape set.
    Pretrain(PretrainArgs),
    /// Decoder-only reconstruction from true center embeddings at mask ratio 1.
    Leakage(LeakageArgs),
    /// Run a grid of pre-training configurations.
    Ablate(AblateArgs),
    /// Fine-tune a classifier on the 8-class synthetic benchmark.
    Finetune(FinetuneArgs),
    /// Mask a point cloud and export input, visible and reconstructed PLYs.
    Reconstruct(ReconstructArgs),
    /// Print parameter counts and the resolved config.
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON config; unset fields take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base configuration the file and flags apply to.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_ratio)]
    mask_ratio: Option<f64>,
    #[arg(long, value_parser = parse_non_negative)]
    eta: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long)]
    no_stop_gradient: bool,
    #[arg(long)]
    no_share_weights: bool,
    #[arg(long, value_parser = parse_target)]
    target: Option<TargetMode>,
    #[arg(long, value_parser = parse_pc_loss)]
    pc_loss: Option<PcLoss>,
    /// Also checkpoint every this many epochs.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    save_every: Option<u64>,
}

#[derive(Args)]
struct LeakageArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of shapes exported as PLY pairs.
    #[arg(long, default_value_t = 4)]
    exports: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false, args = ["checkpoint", "scratch"])]
struct FinetuneArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from a randomly initialized encoder.
    #[arg(long)]
    scratch: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// JSON file with fine-tuning settings.
    #[arg(long)]
    finetune_config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    /// Train only the classification head.
    #[arg(long)]
    frozen: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point cloud as "x y z" lines.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_ratio, default_value = "0.6")]
    mask_ratio: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InfoArgs {
    #[command(flatten)]
    base: ConfigArgs,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is negative"))
    }
}

fn parse_target(s: &str) -> Result<TargetMode, String> {
    s.parse().map_err(|e: pcpmae::Error| e.to_string())
}

fn parse_pc_loss(s: &str) -> Result<PcLoss, String> {
    s.parse().map_err(|e: pcpmae::Error| e.to_string())
}

/// Seed from the environment, if set. A malformed value is a usage error.
fn env_seed() -> Result<Option<u64>, clap::Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            clap::Error::raw(
                clap::error::ErrorKind::InvalidValue,
                format!("{SEED_ENV}={v:?} is not an integer\n"),
            )
        }),
        Err(_) => Ok(None),
    }
}

/// Preset, then config file, then flags (applied by the caller), then
/// the seed environment variable.
fn base_config(args: &ConfigArgs, desk: RunConfig) -> Result<RunConfig> {
    let preset = match args.preset {
        Preset::Desk => desk,
        Preset::Paper => RunConfig::paper(),
    };
    let Some(path) = &args.config else {
        return Ok(preset);
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut merged = serde_json::to_value(&preset)?;
    let overrides: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let Some(obj) = overrides.as_object() else {
        bail!("{}: config must be a JSON object", path.display());
    };
    for (k, v) in obj {
        merged[k] = v.clone();
    }
    RunConfig::from_json(&merged.to_string()).with_context(|| format!("config {}", path.display()))
}

fn finish(mut cfg: RunConfig, seed_flag: Option<u64>, env: Option<u64>) -> Result<RunConfig> {
    if let Some(s) = env.or(seed_flag) {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_row(total: usize) -> impl FnMut(&MetricRow) {
    move |r| {
        eprintln!(
            "epoch {}/{total}  loss {:.6}  pc {:.6}  recon {:.6}  lr {:.3e}",
            r.epoch, r.loss, r.loss_pc, r.loss_recon, r.lr
        )
    }
}

fn pretrain(a: PretrainArgs, env: Option<u64>) -> Result<()> {
    let mut cfg = base_config(&a.base, RunConfig::default())?;
    let t = &mut cfg.train;
    if let Some(m) = a.mask_ratio {
        t.mask_ratio = m;
    }
    if let Some(e) = a.eta {
        t.eta = e;
    }
    if let Some(e) = a.epochs {
        t.epochs = e as usize;
    }
    if a.no_stop_gradient {
        t.stop_gradient = false;
    }
    if let Some(l) = a.pc_loss {
        t.pc_loss = l;
    }
    if a.no_share_weights {
        cfg.model.share_pcm_weights = false;
    }
    if let Some(target) = a.target {
        cfg.model.target_mode = target;
    }
    let cfg = finish(cfg, a.seed, env)?;
    let m = run_pretrain(
        cfg.clone(),
        &a.out,
        a.save_every.map(|k| k as usize),
        print_row(cfg.train.epochs),
    )?;
    println!("{}", serde_json::to_string_pretty(&m.summary)?);
    Ok(())
}

fn leakage(a: LeakageArgs, env: Option<u64>) -> Result<()> {
    let mut cfg = base_config(&a.base, RunConfig::leakage())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e as usize;
    }
    let cfg = finish(cfg, a.seed, env)?;
    let (_, r) = run_leakage(cfg.clone(), &a.out, a.exports, print_row(cfg.train.epochs))?;
    println!(
        "final chamfer {:.6}  center-only baseline {:.6}  ratio {:.4}",
        r.final_chamfer,
        r.baseline_chamfer,
        r.final_chamfer / r.baseline_chamfer
    );
    Ok(())
}

fn ablate(a: AblateArgs, env: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&a.grid)
        .with_context(|| format!("reading {}", a.grid.display()))?;
    let mut grid = Grid::parse(&text).with_context(|| format!("grid {}", a.grid.display()))?;
    if let Some(s) = env {
        grid.base.insert("seed".into(), s.into());
        grid.cells.iter_mut().for_each(|c| {
            c.remove("seed");
        });
    }
    let total = grid.cells.len();
    let ms = run_ablation(&grid, &a.out, |i, m| {
        let last = m.metrics.last().cloned().unwrap_or_default();
        eprintln!(
            "cell {}/{total} done  loss {:.6}  masked {}",
            i + 1,
            last.loss,
            last.masked
        );
    })?;
    println!("{} cells written to {}", ms.len(), a.out.display());
    Ok(())
}

fn finetune(a: FinetuneArgs, env: Option<u64>) -> Result<()> {
    let ckpt = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut cfg = match (&ckpt, &a.base.config) {
        (Some(c), None) => c.config.clone(),
        _ => base_config(&a.base, RunConfig::default())?,
    };
    let mut ft = match &a.finetune_config {
        Some(p) => serde_json::from_str::<FinetuneConfig>(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => FinetuneConfig::default(),
    };
    if let Some(e) = a.epochs {
        ft.epochs = e as usize;
    }
    ft.frozen |= a.frozen;
    cfg.train.cloud_points = ft.cloud_points;
    let seeds = match env {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    let cfg = finish(cfg, None, None)?;
    let (_, s) = run_finetune(ckpt.as_ref(), &cfg, &ft, &seeds, &a.out, |r| {
        eprintln!("seed {}  accuracy {:.4}", r.seed, r.accuracy)
    })?;
    println!(
        "accuracy {:.4} ± {:.4} over {} seeds",
        s.mean,
        s.std,
        seeds.len()
    );
    Ok(())
}

fn reconstruct(a: ReconstructArgs, env: Option<u64>) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = ckpt.model::<f32>()?;
    let cloud = read_xyz::<f32>(&a.input)?;
    let seed = env.or(a.seed).unwrap_or(ckpt.config.train.seed);
    let (_, r) = run_reconstruct(&model, &ckpt.config, &cloud, a.mask_ratio, seed, &a.out)?;
    println!(
        "input {}  visible {}  reconstruction {} points",
        r.input.len(),
        r.visible.len(),
        r.reconstruction.len()
    );
    Ok(())
}

fn info(a: InfoArgs) -> Result<()> {
    let cfg: ModelConfig = base_config(&a.base, RunConfig::default())?.model;
    cfg.validate()?;
    println!("{}", model_info(&cfg));
    Ok(())
}

fn run(cli: Cli, env: Option<u64>) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a, env),
        Command::Leakage(a) => leakage(a, env),
        Command::Ablate(a) => ablate(a, env),
        Command::Finetune(a) => finetune(a, env),
        Command::Reconstruct(a) => reconstruct(a, env),
        Command::Info(a) => info(a),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    let env = env_seed().unwrap_or_else(|e| e.exit());
    let out = match &cli.command {
        Command::Pretrain(a) => Some(a.out.clone()),
        Command::Leakage(a) => Some(a.out.clone()),
        Command::Ablate(a) => Some(a.out.clone()),
        Command::Finetune(a) => Some(a.out.clone()),
        Command::Reconstruct(a) => Some(a.out.clone()),
        Command::Info(_) => None,
    };
    let result = out
        .as_deref()
        .map_or(Ok(()), ensure_dir)
        .and_then(|_| run(cli, env));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
