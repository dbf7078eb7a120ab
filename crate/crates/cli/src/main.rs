//! `ocmae`: generate synthetic scenes, train, evaluate and visualize.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocmae_core::checkpoint::Checkpoint;
use ocmae_core::config::{self, RunConfig};
use ocmae_core::data;
use ocmae_core::trainer::{self, FitOptions};
use ocmae_core::{viz, Error};

#[derive(Parser)]
#[command(name = "ocmae", version, about = "Object-centric masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (`key=value`); repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (`scene.*` keys configure the generator).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the log and checkpoints go to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `out.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory (overrides `data.dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on the eval split at masking ratio 0; prints JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write decomposition grids for the first `n` eval images.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data { .. } | Error::Io { .. } | Error::Checkpoint(_) | Error::Metric(_) => 3,
        Error::NonFinite { .. } | Error::NonFiniteTerm(_) => 4,
    }
}

fn run_config(common: &Common) -> ocmae_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// The checkpoint's config, checked against any config given on the command line.
fn checkpoint_and_config(common: &Common, path: &Path) -> ocmae_core::Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if common.config.is_some() || !common.overrides.is_empty() {
        let cfg = run_config(common)?;
        if cfg.model.k != ck.config.model.k {
            return Err(Error::Config(format!(
                "config has model.k = {} but {} was trained with model.k = {}",
                cfg.model.k,
                path.display(),
                ck.config.model.k
            )));
        }
        if cfg.model != ck.config.model {
            return Err(Error::Config(format!("model config differs from the one stored in {}", path.display())));
        }
    }
    Ok(ck)
}

fn eval_split(ck: &Checkpoint, data_dir: Option<&PathBuf>) -> ocmae_core::Result<data::Dataset> {
    let dir = data_dir.cloned().unwrap_or_else(|| ck.config.data_dir.clone());
    if !dir.join(data::MANIFEST).exists() {
        return Err(Error::Data { path: dir, message: "no manifest.txt found".into() });
    }
    Ok(data::load(&dir, ck.config.split_fraction)?.1)
}

fn run(cli: Cli) -> ocmae_core::Result<()> {
    match cli.command {
        Command::GenData { common, count, out } => {
            let mut pairs = match &common.config {
                Some(p) => config::parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?)?,
                None => Vec::new(),
            };
            for o in &common.overrides {
                pairs.push(config::parse_override(o)?);
            }
            let mut spec = config::scene_spec_from_pairs(&pairs)?;
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            data::generate(&spec, count, &out)?;
            log::info!("wrote {} scenes to {}", count, out.display());
        }
        Command::Train { common, out, data, resume, stop_after } => {
            let mut cfg = run_config(&common)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            cfg.validate()?;
            if !cfg.data_dir.join(data::MANIFEST).exists() {
                return Err(Error::Data { path: cfg.data_dir.clone(), message: "dataset not found (no manifest.txt)".into() });
            }
            let (train, eval) = data::load(&cfg.data_dir, cfg.split_fraction)?;
            let report = trainer::fit(&cfg, &train, &eval, &FitOptions { resume, stop_after_epochs: stop_after })?;
            if let Some(m) = report.final_metrics {
                println!("{}", serde_json::to_string(&m).expect("plain struct"));
            }
        }
        Command::Eval { common, checkpoint, data, out } => {
            let ck = checkpoint_and_config(&common, &checkpoint)?;
            let split = eval_split(&ck, data.as_ref())?;
            let summary = trainer::evaluate(&ck.model, &split, ck.config.eval_batch_size)?;
            let json = serde_json::to_string(&summary).expect("plain struct");
            println!("{}", json);
            if let Some(path) = out {
                std::fs::write(&path, format!("{}\n", json)).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Viz { common, checkpoint, data, n, out } => {
            if n == 0 {
                return Err(Error::Config("--n must be at least 1".into()));
            }
            let ck = checkpoint_and_config(&common, &checkpoint)?;
            let split = eval_split(&ck, data.as_ref())?;
            let count = if n > split.len() {
                log::warn!("--n {} exceeds the {} eval images; clamping", n, split.len());
                split.len()
            } else {
                n
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            for i in 0..count {
                let grid = viz::render_grid(&ck.model, &split.batch(&[i]).images)?;
                let path = out.join(format!("grid_{:06}.png", i));
                data::write_rgb_png(&path, grid.width, grid.height, &grid.rgb)?;
            }
            log::info!("wrote {} grids to {}", count, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
