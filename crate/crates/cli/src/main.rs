//! `cpriv`: dataset generation, pretraining, α sweeps, attacks, export and
//! the entity service from one binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
//! (a `failures.json` manifest is written to the run directory).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpriv_core::service::{ServerConfig, DEFAULT_MAX_FRAME_BYTES, DEFAULT_PORT};
use cpriv_core::training::TrainMode;
use log::error;

use crate::commands::{CaptureArgs, Ctx, ExportArgs, Manifest};
use crate::config::{Architecture, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "cpriv", version, about = "Train and evaluate privacy-preserving image sanitizers")]
struct Cli {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which run directories are created.
    #[arg(long, global = true, env = "CPRIV_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Use this run directory instead of the one derived from the config hash.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Parallel sweep workers.
    #[arg(long, global = true, env = "CPRIV_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OverrideArgs {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated α values, e.g. 0,0.05,0.2,0.5,0.8.
    #[arg(long, global = true, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Sanitizer training epochs per cell.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    pretrain_epochs: Option<usize>,
    #[arg(long, global = true)]
    train_size: Option<usize>,
    #[arg(long, global = true)]
    test_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets (TDS1).
    GenData,
    /// Train the utility and privacy classifiers on raw data.
    Pretrain,
    /// Train and evaluate every (architecture, mode, α) cell, then write the report.
    Sweep,
    /// Retrain a fresh privacy head against every trained sanitizer.
    Attack,
    /// Write one trained sanitizer as a PSF1 bundle.
    Export {
        #[arg(long, value_parser = parse_architecture, default_value = "deterministic")]
        architecture: Architecture,
        #[arg(long, value_parser = parse_mode, default_value = "adversarial")]
        mode: TrainMode,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many golden input/output pairs next to the bundle.
        #[arg(long, default_value_t = 0)]
        golden: usize,
    },
    /// Run the entity server on the pretrained classifiers.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_FRAME_BYTES)]
        max_frame_bytes: u32,
    },
    /// Stream test frames to a running server, optionally sanitized locally.
    Capture {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// PSF1 bundle; without it frames are sent raw.
        #[arg(long)]
        sanitizer: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        /// Write results and summary as JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Re-evaluate trained cells and regenerate tables and plots.
    Report,
}

fn parse_architecture(s: &str) -> Result<Architecture, String> {
    match s {
        "deterministic" => Ok(Architecture::Deterministic),
        "stochastic" => Ok(Architecture::Stochastic),
        other => Err(format!("unknown architecture `{other}` (deterministic|stochastic)")),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "plug_and_play" => Ok(TrainMode::PlugAndPlay),
        "adversarial" => Ok(TrainMode::Adversarial),
        "collaborative" => Ok(TrainMode::Collaborative),
        other => Err(format!("unknown mode `{other}` (plug_and_play|adversarial|collaborative)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let o = &cli.overrides;
    let overrides = Overrides {
        seed: o.seed,
        alphas: o.alphas.clone(),
        epochs: o.epochs,
        pretrain_epochs: o.pretrain_epochs,
        train_size: o.train_size,
        test_size: o.test_size,
    };
    let cfg = match RunConfig::load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(1);
    }
    let run_dir = cli.run_dir.clone().unwrap_or_else(|| cfg.run_dir(&cli.out_root));
    let ctx = Ctx {
        cfg,
        run_dir,
        workers: cli.workers,
    };

    let result: anyhow::Result<Manifest> = match &cli.command {
        Command::GenData => commands::cmd_gen_data(&ctx).map(|_| Manifest::default()),
        Command::Pretrain => commands::cmd_pretrain(&ctx).map(|_| Manifest::default()),
        Command::Sweep => commands::cmd_sweep(&ctx),
        Command::Attack => commands::cmd_attack(&ctx),
        Command::Export {
            architecture,
            mode,
            alpha,
            out,
            golden,
        } => commands::cmd_export(
            &ctx,
            &ExportArgs {
                architecture: *architecture,
                mode: *mode,
                alpha: *alpha,
                out: out.clone(),
                golden: *golden,
            },
        )
        .map(|_| Manifest::default()),
        Command::Serve {
            host,
            port,
            topk,
            max_frame_bytes,
        } => commands::cmd_serve(
            &ctx,
            &ServerConfig {
                host: host.clone(),
                port: *port,
                topk: *topk,
                max_frame_bytes: *max_frame_bytes,
            },
        )
        .map(|_| Manifest::default()),
        Command::Capture {
            host,
            port,
            sanitizer,
            limit,
            output,
        } => commands::cmd_capture(
            &ctx,
            &CaptureArgs {
                host: host.clone(),
                port: *port,
                sanitizer: sanitizer.clone(),
                limit: *limit,
                output: output.clone(),
            },
        )
        .map(|_| Manifest::default()),
        Command::Report => commands::cmd_report(&ctx).map(|_| Manifest::default()),
    };

    let mut manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let mut m = Manifest::default();
            m.record(format!("{:?}", cli.command).split_whitespace().next().unwrap_or("command"), &e);
            m
        }
    };
    if manifest.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in &manifest.failures {
        error!("{}: {}", f.stage, f.error);
        eprintln!("error in {}: {}", f.stage, f.error);
    }
    match manifest.write(&ctx.run_dir) {
        Ok(p) => eprintln!("failure manifest written to {}", p.display()),
        Err(e) => eprintln!("could not write failure manifest: {e:#}"),
    }
    manifest.failures.clear();
    ExitCode::from(2)
}
