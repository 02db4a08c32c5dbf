use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyatt_harness::config::{default_thresholds, seed_from_env, RunConfig};
use hyatt_harness::error::{HarnessError, Result};
use hyatt_harness::synth::{generate, SyntheticSpec};
use hyatt_harness::{evaluate, flops, gradsuite, train};

#[derive(Parser)]
#[command(name = "hyatt", about = "Landmark detection: data generation, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run config; writes checkpoint.bin and loss.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a manifest; writes sdr.csv, summary.csv, per_point.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated SDR thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Per-stage attention multiply-accumulate counts.
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Also check the full network in 64-bit precision.
        #[arg(long)]
        extended_precision: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Gen { spec, out } => {
            let mut spec: SyntheticSpec = read_config(&spec)?;
            if let Some(seed) = seed_from_env()? {
                spec.seed = seed;
            }
            let m = generate(&spec, &out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Cmd::Train { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_seed_env()?;
            let t = train::run(&cfg, &out, |e| {
                let val = e.val_mre.map(|v| format!(" val_mre={v:.4}")).unwrap_or_default();
                println!("epoch={} iterations={} loss={:.6e}{val}", e.epoch, e.iterations, e.loss);
            })?;
            println!("trained {} iterations; outputs in {}", t.iterations, out.display());
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            out,
            thresholds,
        } => {
            let th = thresholds.unwrap_or_else(default_thresholds);
            let report = evaluate::run(&checkpoint, &manifest, &out, &th)?;
            println!("{}", report.display_line());
        }
        Cmd::Flops { config } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_seed_env()?;
            let rep = flops::full_report(&cfg.model)?;
            print!("{}", flops::report_csv(&rep));
        }
        Cmd::Gradcheck { extended_precision } => {
            let precision = if extended_precision {
                gradsuite::Precision::Extended
            } else {
                gradsuite::Precision::Default
            };
            let checks = gradsuite::run_all(precision)?;
            for c in &checks {
                println!("{}", c.line());
            }
            return Ok(checks.iter().all(|c| c.passed()));
        }
    }
    Ok(true)
}

fn read_config<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error kind=gradcheck message=\"one or more checks failed\"");
            ExitCode::from(1)
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ").replace('"', "'");
            eprintln!("error kind={} message=\"{msg}\"", e.kind());
            ExitCode::from(2)
        }
    }
}
