use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use leap::checkpoint::Checkpoint;
use leap::config::{Method, Overrides, RunConfig};
use leap::model::GranularityProfile;
use leap::report::report_layer_densities;
use leap::sweep::{sweep, SweepAxis};
use leap::train::{provide_teacher, run_training, train_teacher, CHECKPOINT_FILE};
use leap::{Error, Result};

#[derive(Parser)]
#[command(name = "leap", version, about = "Prune a toy transformer with learnable per-matrix thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and prune one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        profile: Option<GranularityProfile>,
        #[arg(long)]
        target_density: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        lambda_max: Option<f64>,
        #[arg(long)]
        lambda_min: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-matrix densities of a checkpoint as CSV.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one training per value of an axis and collect a CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the dense teacher and save its checkpoint.
    Teacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            method,
            profile,
            target_density,
            temperature,
            lambda_max,
            lambda_min,
            alpha,
            seed,
            out,
        } => {
            let overrides = Overrides {
                method,
                profile,
                target_density,
                temperature,
                lambda_max,
                lambda_min,
                alpha,
                seed,
                out_dir: out,
            };
            let config = overrides.apply(RunConfig::load(&config)?)?;
            let teacher = provide_teacher(&config, &config.out_dir)?;
            let outcome = run_training(&config, teacher.as_ref(), Some(&config.out_dir))?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Report { checkpoint } => {
            let report = report_layer_densities(&Checkpoint::load(&checkpoint)?)?;
            print!("{}", report.to_csv()?);
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(out) = out {
                config.out_dir = out;
            }
            let teacher = provide_teacher(&config, &config.out_dir)?;
            let rows = sweep(&config, axis, &values, teacher.as_ref(), Some(&config.out_dir))?;
            print!("{}", leap::sweep::to_csv(axis, &rows)?);
        }
        Command::Teacher { config, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(out) = out {
                config.out_dir = out;
            }
            let outcome = train_teacher(&config, Some(&config.out_dir))?;
            println!(
                "{}",
                json!({
                    "accuracy": outcome.accuracy,
                    "checkpoint": config.out_dir.join(CHECKPOINT_FILE),
                })
            );
        }
    }
    Ok(())
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { field, .. } => v["field"] = json!(field),
        Error::NotConverged { accuracy, required } => {
            v["accuracy"] = json!(accuracy);
            v["required"] = json!(required);
        }
        _ => {}
    }
    v
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(match e {
                Error::Config { .. } | Error::Usage(_) => 2,
                _ => 1,
            })
        }
    }
}
