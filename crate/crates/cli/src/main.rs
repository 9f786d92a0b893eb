use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::info;
use twinkern::data::{gen_sshape, load_csv, save_csv, SShapeParams};
use twinkern::harness::{cross_validate, run_experiment, ExperimentConfig};
use twinkern::{learn_transforms, BasisKind, BasisSpec, Error, KernelParams};

#[derive(Parser)]
#[command(
    name = "twinkern",
    version,
    about = "Learned kernel transforms for twin Gaussian process regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a degree sweep and write report.json and gain_surface.tsv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate the S-shape dataset as CSV.
    GenSshape {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select bandwidths and degrees by k-fold cross-validation.
    Cv {
        #[arg(long)]
        config: PathBuf,
        /// Also write the outcome as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn transform coefficients for one degree pair.
    Learn {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        basis: BasisKind,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        weight_param: f64,
        #[arg(long)]
        d1: usize,
        #[arg(long)]
        d2: usize,
        #[arg(long, allow_negative_numbers = true)]
        gamma_x: f64,
        #[arg(long, allow_negative_numbers = true)]
        gamma_y: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failures in user-supplied settings exit with 1, everything else with 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::InvalidKernelParam(_)
            | Error::InvalidWeightParam(_)
            | Error::DegreeTooLarge(_),
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            workers,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if workers.is_some() {
                cfg.workers = workers;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            let report = run_experiment(&cfg)?;
            report
                .write_to(&dir)
                .with_context(|| format!("writing report to {}", dir.display()))?;
            match &report.chosen {
                Some(c) => println!(
                    "best cell ({}, {}): gain {:.2}% over baseline MAE {:.6}",
                    c.d1,
                    c.d2,
                    c.gain_percent,
                    report.baseline_mae.unwrap_or(f64::NAN)
                ),
                None => println!("no cell completed"),
            }
            println!("wrote {}", dir.join("report.json").display());
        }
        Command::GenSshape {
            n,
            sigma,
            seed,
            out,
        } => {
            let data = gen_sshape(&SShapeParams {
                n,
                noise_sigma: sigma,
                seed,
            })
            .map_err(|e| match e {
                Error::InvalidData(m) | Error::Shape(m) => Error::Config(m),
                Error::TooFewSamples { needed, got } => {
                    Error::Config(format!("n must be at least {needed}, got {got}"))
                }
                other => other,
            })?;
            save_csv(&data, &out).with_context(|| format!("writing {}", out.display()))?;
            info!("wrote {n} rows to {}", out.display());
        }
        Command::Cv { config, out } => {
            let cfg = load_config(&config)?;
            let outcome = cross_validate(&cfg)?;
            let text = serde_json::to_string_pretty(&outcome)?;
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n"))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "gamma_x={} gamma_y={} d1={} d2={} mean_mae={}",
                outcome.best.gamma_x,
                outcome.best.gamma_y,
                outcome.best.d1,
                outcome.best.d2,
                outcome.best_mae
            );
        }
        Command::Learn {
            train,
            basis,
            weight_param,
            d1,
            d2,
            gamma_x,
            gamma_y,
            out,
        } => {
            let basis = match basis {
                BasisKind::Monomial => BasisSpec::monomial(),
                BasisKind::Gegenbauer => BasisSpec::gegenbauer(weight_param)?,
            };
            if d1 == 0 || d2 == 0 {
                return Err(Error::Config("degrees must be at least 1".into()).into());
            }
            if !train.is_file() {
                return Err(
                    Error::Config(format!("training file {} not found", train.display())).into(),
                );
            }
            let kx = KernelParams::rbf(gamma_x)?;
            let ky = KernelParams::rbf(gamma_y)?;
            let data = load_csv(&train).with_context(|| format!("reading {}", train.display()))?;
            let learned = learn_transforms(&data, &kx, &ky, &basis, d1, d2)?;
            std::fs::write(&out, learned.to_json()? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            println!("objective {}", learned.objective_value);
        }
    }
    Ok(())
}
