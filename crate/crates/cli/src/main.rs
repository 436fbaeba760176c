use anyhow::Result;
use clap::{Parser, Subcommand};
use denseflow_cli::commands;
use denseflow_cli::config::RunConfig;
use denseflow_cli::train::cmd_train;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "denseflow",
    about = "Invertible dense-block normalizing flows on 2-D toy densities",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow by maximum likelihood on a toy dataset.
    Train {
        /// JSON run configuration; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's dataset (two_moons | two_circles | checkerboard).
        #[arg(long)]
        dataset: Option<String>,
        /// Override the config's architecture (dense | residual).
        #[arg(long)]
        arch: Option<String>,
        /// Override the config's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out NLL report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        /// exact | truncated | roulette
        #[arg(long)]
        estimator: Option<String>,
        /// Held-out sample count.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw base-density samples and invert the stack.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Fixed-point tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/samples")]
        out: PathBuf,
    },
    /// Maximum forward/inverse round-trip error over dataset points.
    InvertCheck {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1_000)]
        n: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
    },
    /// Exact log-density on a grid: CSV plus a P6 heat image.
    DensityGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// x_lo,x_hi,y_lo,y_hi
        #[arg(long, default_value = "-4,4,-4,4", value_parser = parse_bounds)]
        bounds: (f64, f64, f64, f64),
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long, default_value = "runs/grid")]
        out: PathBuf,
    },
    /// Distance-ratio table of the activation functions.
    Analyze {
        /// Standard deviation of the sampling normal.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Comma-separated dimensions.
        #[arg(long, default_value = "1,128,1024", value_parser = parse_usizes)]
        dims: std::vec::Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certified Lipschitz bound of an activation across slope parameters.
    Bound {
        /// identity | sigmoid | relu | crelu | lipswish | leakylswish | clipswish
        #[arg(long)]
        activation: String,
        /// Comma-separated beta values (defaults to the initialization beta).
        #[arg(long, default_value = "", value_parser = parse_f64s)]
        betas: std::vec::Vec<f64>,
    },
}

fn parse_bounds(s: &str) -> Result<(f64, f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if parts.len() != 4 {
        return Err("bounds need four comma-separated numbers".into());
    }
    Ok((parts[0], parts[1], parts[2], parts[3]))
}

fn parse_usizes(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_f64s(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            dataset,
            arch,
            iterations,
            seed,
            out,
        } => {
            let mut run = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(d) = dataset {
                run.dataset = d;
            }
            if let Some(a) = arch {
                run.arch = a;
            }
            if let Some(i) = iterations {
                run.iterations = i;
            }
            if let Some(s) = seed {
                run.seed = s;
            }
            if let Some(o) = out {
                run.out_dir = o.to_string_lossy().into_owned();
            }
            let outcome = cmd_train(&run)?;
            match outcome.test_nll {
                Some(nll) => println!(
                    "trained {} iterations in {:.1}s; test NLL {nll:.4} nats; final checkpoint {}",
                    outcome.iterations_run,
                    outcome.elapsed_seconds,
                    outcome.final_checkpoint.display()
                ),
                None => println!(
                    "aborted on non-finite loss after {} iterations; last good checkpoint {}",
                    outcome.iterations_run,
                    outcome.final_checkpoint.display()
                ),
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            estimator,
            n,
            out,
        } => {
            commands::cmd_eval(
                &checkpoint,
                dataset.as_deref(),
                estimator.as_deref(),
                n,
                out.as_deref(),
            )?;
        }
        Command::Sample {
            checkpoint,
            n,
            tol,
            max_iter,
            seed,
            out,
        } => {
            commands::cmd_sample(&checkpoint, n, tol, max_iter, seed, &out)?;
        }
        Command::InvertCheck {
            checkpoint,
            n,
            tol,
            max_iter,
        } => {
            commands::cmd_invert_check(&checkpoint, n, tol, max_iter)?;
        }
        Command::DensityGrid {
            checkpoint,
            bounds,
            resolution,
            out,
        } => {
            commands::cmd_density_grid(&checkpoint, bounds, resolution, &out)?;
        }
        Command::Analyze {
            scale,
            dims,
            pairs,
            seed,
            out,
        } => {
            commands::cmd_analyze(scale, &dims, pairs, seed, out.as_deref())?;
        }
        Command::Bound { activation, betas } => {
            commands::cmd_bound(&activation, &betas)?;
        }
    }
    Ok(())
}
