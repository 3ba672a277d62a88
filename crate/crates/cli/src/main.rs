//! `vqcal`: quantize, calibrate, evaluate and report on toy diffusion transformers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{CalibOverrides, DitOverrides, RunConfig};

/// Failure of a command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<vqcal_core::Error> for CliError {
    fn from(e: vqcal_core::Error) -> Self {
        use vqcal_core::Error;
        match e {
            Error::Diverged { .. } | Error::NonFinite(_) => Self::numeric(e.to_string()),
            other => Self::input(other.to_string()),
        }
    }
}

impl From<vqcal_core::modelio::FormatError> for CliError {
    fn from(e: vqcal_core::modelio::FormatError) -> Self {
        Self::input(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "vqcal", version, about = "Vector quantization and calibration of toy diffusion transformers")]
struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded random floating-point toy model.
    MakeToyModel {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        dit: DitOverrides,
    },
    /// K-means codebooks and candidate sets for every block linear layer.
    Quantize {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Candidate-set sidecar; defaults to `<out>.cand`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Effective bits per weight (2 or 3 select the presets).
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        /// Candidate assignments per sub-vector.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        kmeans_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Calibrate codebooks and assignments against floating-point trajectories.
    Calibrate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        quantized: Option<PathBuf>,
        /// Candidate-set sidecar; defaults to `<quantized>.cand`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-iteration log (JSON lines); defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Calibration trajectories.
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        cache_seed: Option<u64>,
        /// Guidance while sampling calibration trajectories.
        #[arg(long)]
        cache_cfg_scale: Option<f32>,
        #[arg(long, env = "VQCAL_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
        #[command(flatten)]
        calib: CalibOverrides,
        #[command(flatten)]
        dit: DitOverrides,
    },
    /// Compare quantized models (and uniform baselines) with the floating-point model.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// `LABEL=PATH` or `PATH` of a quantized file or model container; repeatable.
        #[arg(long = "row")]
        rows: Vec<String>,
        /// Add a uniform-quantization row at this bit-width; repeatable.
        #[arg(long)]
        uq_bits: Vec<u32>,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        eval_seed: Option<u64>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "VQCAL_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
        #[command(flatten)]
        dit: DitOverrides,
    },
    /// Loss curve and candidate-position histograms from a calibration run.
    Report {
        #[arg(long)]
        log: PathBuf,
        /// Calibrated quantized file.
        #[arg(long)]
        quantized: PathBuf,
        /// Candidate sidecar written by calibrate; defaults to `<quantized>.cand`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Same-assignment gradient cosine similarity of a quantized model.
    Diagnose {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        quantized: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        cache_seed: Option<u64>,
        /// Cached `(trajectory, t)` pairs in the loss.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "VQCAL_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Summarize a model container, quantized file or sidecar.
    Inspect { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::MakeToyModel { out, seed, dit } => commands::make_toy_model(&cfg, out, seed, &dit),
        Command::Quantize { model, out, sidecar, bits, k, d, n, kmeans_iters, seed } => {
            commands::quantize(&cfg, commands::QuantizeArgs { model, out, sidecar, bits, k, d, n, kmeans_iters, seed })
        }
        Command::Calibrate {
            model,
            quantized,
            sidecar,
            out,
            log,
            seed,
            trajectories,
            cache_seed,
            cache_cfg_scale,
            cache_dir,
            calib,
            dit,
        } => commands::calibrate(
            &cfg,
            commands::CalibrateArgs {
                model,
                quantized,
                sidecar,
                out,
                log,
                seed,
                trajectories,
                cache_seed,
                cache_cfg_scale,
                cache_dir,
                calib,
                dit,
            },
        ),
        Command::Eval { model, rows, uq_bits, trajectories, eval_seed, out, cache_dir, dit } => commands::eval(
            &cfg,
            commands::EvalArgs { model, rows, uq_bits, trajectories, eval_seed, out, cache_dir, dit },
        ),
        Command::Report { log, quantized, sidecar, out_dir } => commands::report(&log, &quantized, sidecar, &out_dir),
        Command::Diagnose { model, quantized, trajectories, cache_seed, samples, seed, out, cache_dir } => {
            commands::diagnose(
                &cfg,
                commands::DiagnoseArgs { model, quantized, trajectories, cache_seed, samples, seed, out, cache_dir },
            )
        }
        Command::Inspect { path } => commands::inspect(&path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
