use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use gptube::experiment::{cmd_bound, cmd_fit, cmd_mm, cmd_reproduce, cmd_validate, ExperimentConfig, Report};
use gptube::gp::GpModel;
use gptube::tube::TubeOutcome;
use gptube::Error;

#[derive(Parser)]
#[command(name = "gptube", version, about = "Certified probability tubes for GP trajectory predictions")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, env = "GPTUBE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "GPTUBE_PRESET")]
    preset: Option<String>,
    #[arg(long, global = true, env = "GPTUBE_EPSILON")]
    epsilon: Option<f64>,
    #[arg(long, global = true, env = "GPTUBE_HORIZON")]
    horizon: Option<usize>,
    #[arg(long, global = true, env = "GPTUBE_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "GPTUBE_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect or load data and fit the GP.
    Fit,
    /// Compute the certified tube.
    Bound {
        /// Trained model; fitted from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Moment-matching rollout.
    Mm {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Sample GP trajectories against a schedule.
    Validate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// `schedule.json` written by `bound`; computed when absent.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Run the pipeline behind a table or figure.
    Reproduce {
        #[arg(value_parser = ["table1", "table2", "fig1", "fig3"])]
        name: String,
    },
}

fn config(cli: &Cli) -> gptube::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &cli.preset {
        cfg.preset = Some(p.clone());
    }
    if cli.epsilon.is_some() {
        cfg.epsilon = cli.epsilon;
    }
    if cli.horizon.is_some() {
        cfg.horizon = cli.horizon;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn model(cfg: &ExperimentConfig, path: &Option<PathBuf>) -> gptube::Result<GpModel> {
    match path {
        Some(p) => GpModel::load(p),
        None => cmd_fit(cfg),
    }
}

enum Outcome {
    Done(serde_json::Value),
    Infeasible(serde_json::Value),
}

fn tube_status(outcome: &TubeOutcome) -> Outcome {
    let value = json!({
        "steps": outcome.schedule.steps.len(),
        "radii": outcome.schedule.radii(),
        "infeasible": outcome.infeasible,
    });
    if outcome.is_feasible() {
        Outcome::Done(value)
    } else {
        Outcome::Infeasible(value)
    }
}

fn run(cli: &Cli) -> gptube::Result<Outcome> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Fit => {
            let m = cmd_fit(&cfg)?;
            Ok(Outcome::Done(json!({ "hyperparams": m.hyperparams() })))
        }
        Command::Bound { model: path } => {
            let m = model(&cfg, path)?;
            Ok(tube_status(&cmd_bound(&cfg, &m)?))
        }
        Command::Mm { model: path } => {
            let m = model(&cfg, path)?;
            let r = cmd_mm(&cfg, &m)?;
            Ok(Outcome::Done(json!({ "steps": r.len() })))
        }
        Command::Validate { model: path, schedule } => {
            let m = model(&cfg, path)?;
            let outcome: TubeOutcome = match schedule {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => cmd_bound(&cfg, &m)?,
            };
            if !outcome.is_feasible() {
                return Ok(tube_status(&outcome));
            }
            let summary = cmd_validate(&cfg, &m, &outcome.schedule)?;
            Ok(Outcome::Done(serde_json::to_value(summary)?))
        }
        Command::Reproduce { name } => {
            let report: Report = name.parse()?;
            let out = cmd_reproduce(report, &cfg)?;
            let value = json!({
                "files": out.files,
                "feasible": out.feasible,
            });
            Ok(if out.feasible {
                Outcome::Done(value)
            } else {
                Outcome::Infeasible(value)
            })
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension-mismatch",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::NonFinite(_) => "non-finite",
        Error::NotPositiveDefinite { .. } => "not-positive-definite",
        Error::NegativeVariance { .. } => "negative-variance",
        Error::Infeasible { .. } => "infeasible",
        Error::UnknownPreset(_) => "unknown-preset",
        Error::Unsupported(_) => "unsupported",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Done(v)) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Ok(Outcome::Infeasible(v)) => {
            eprintln!("{}", json!({ "status": "infeasible", "detail": v }));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{}", json!({ "status": "error", "kind": error_kind(&e), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
