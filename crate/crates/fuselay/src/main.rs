//! Pipeline CLI: scenario simulation, initialization, full two-layer runs,
//! and evaluation.
//!
//! Exit codes: 0 success, 2 config error, 3 gate/initialization failure,
//! 4 solver divergence, 5 I/O error. Set `FUSELAY_LOG` for diagnostics.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use fuselay::config::Config;
use fuselay::pipeline::{self, PipelineError, RunOptions};

#[derive(Parser)]
#[command(
    name = "fuselay",
    version,
    about = "Multi-layer visual-inertial-GNSS fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario from a config file.
    Simulate {
        /// Scenario config (flat key = value).
        #[arg(long)]
        config: PathBuf,
        /// Output scenario directory.
        #[arg(long)]
        out: PathBuf,
        /// Override noise.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the three-step initialization on a scenario directory.
    Init {
        /// Scenario directory (from `simulate`).
        scenario: PathBuf,
    },
    /// Full two-layer run: initialization, sliding-window BA, pose graph.
    Run {
        /// Scenario directory (from `simulate`).
        scenario: PathBuf,
        /// Output directory for trajectories, logs and estimates.
        #[arg(long)]
        out: PathBuf,
        /// Bootstrap from ground truth instead of initializing.
        #[arg(long)]
        skip_init: bool,
        /// Keep the camera-IMU extrinsic fixed at calibration.
        #[arg(long)]
        fix_extrinsics: bool,
    },
    /// Evaluate a trajectory against ground truth.
    Eval {
        /// Estimated trajectory (TUM format).
        trajectory: PathBuf,
        /// Ground-truth trajectory (TUM format).
        ground_truth: PathBuf,
        /// Optional `estimated,true` scale pair for a scale-error line.
        #[arg(long)]
        scale: Option<String>,
        /// Write the report here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let mut cfg = Config::load(&config)?;
            if let Some(seed) = seed {
                cfg.set("noise.seed", seed);
            }
            pipeline::cmd_simulate(&cfg, &out)?;
            println!("scenario written to {}", out.display());
            Ok(())
        }
        Command::Init { scenario } => {
            let report = pipeline::cmd_init(&scenario)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Run {
            scenario,
            out,
            skip_init,
            fix_extrinsics,
        } => {
            let opts = RunOptions {
                skip_init,
                fix_extrinsics,
            };
            let summary = pipeline::cmd_run(&scenario, &out, &opts)?;
            println!(
                "run complete: {} keyframes, {} fused poses, outputs in {}",
                summary.keyframes,
                summary.fused_trajectory.len(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            trajectory,
            ground_truth,
            scale,
            out,
        } => {
            let scale_pair = match scale {
                Some(s) => {
                    let parts: Vec<f64> = s
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| {
                            PipelineError::Config(fuselay::config::ConfigError::BadValue {
                                key: "--scale".to_string(),
                                reason: format!("`{s}` is not `estimated,true`"),
                            })
                        })?;
                    if parts.len() != 2 {
                        return Err(PipelineError::Config(
                            fuselay::config::ConfigError::BadValue {
                                key: "--scale".to_string(),
                                reason: "expected two comma-separated values".to_string(),
                            },
                        ));
                    }
                    Some((parts[0], parts[1]))
                }
                None => None,
            };
            let report = pipeline::cmd_eval(&trajectory, &ground_truth, scale_pair)?;
            print!("{report}");
            if let Some(path) = out {
                std::fs::write(&path, &report).map_err(|source| {
                    PipelineError::Io(fuselay::io::IoError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                })?;
            }
            Ok(())
        }
    }
}
