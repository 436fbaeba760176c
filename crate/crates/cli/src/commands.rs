//! Evaluation, sampling, inversion-check, density-grid, analysis, and bound
//! commands. Each returns its headline numbers so tests can drive the same
//! code paths the binary does.

use crate::config::parse_estimator;
use crate::ppm;
use crate::train::load_for_eval;
use anyhow::Result;
use denseflow::activations::{beta_init_effective, certified_bound, ActivationSpec};
use denseflow::inversion::{invert_model, round_trip_error};
use denseflow::likelihood::{log_prob_rows, nll_nats, Estimator};
use denseflow::ratios::table_report;
use denseflow::tape::Tape;
use denseflow::tensor::Tensor;
use denseflow::toydata::{sample_toy, ToyDatasetKind};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Stream offsets relative to the run seed, disjoint from training's 1..=3.
const SAMPLE_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 3;

pub struct EvalReport {
    pub nll: f64,
    pub per_block_logdet: Vec<f64>,
    pub n_samples: usize,
    pub report_path: Option<PathBuf>,
}

/// NLL of a held-out set drawn from the dataset generator.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&str>,
    estimator: Option<&str>,
    n_samples: Option<usize>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt = load_for_eval(checkpoint)?;
    let config = &ckpt.config;
    let kind = match dataset {
        Some(name) => ToyDatasetKind::parse(name)?,
        None => config.dataset_kind()?,
    };
    let est = match estimator {
        Some(name) => parse_estimator(
            name,
            config.n_terms,
            config.n_probes,
            config.geom_p,
            config.leading_exact,
        )?,
        None => config.estimator()?,
    };
    let n = n_samples.unwrap_or(config.eval_samples);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(EVAL_STREAM));
    let test_set = sample_toy(kind, n, &mut rng);
    let (nll, per_block) = nll_nats(&ckpt.model, &test_set, &est, &mut rng)?;

    let mut report = String::from("metric,value\n");
    writeln!(report, "nll_nats,{nll:.6}")?;
    writeln!(report, "n_samples,{n}")?;
    for (i, ld) in per_block.iter().enumerate() {
        writeln!(report, "block{i}_mean_logdet,{ld:.6}")?;
    }
    let report_path = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("eval.csv");
            std::fs::write(&path, &report)?;
            Some(path)
        }
        None => None,
    };
    println!("{report}");
    Ok(EvalReport {
        nll,
        per_block_logdet: per_block,
        n_samples: n,
        report_path,
    })
}

pub struct SampleReport {
    pub samples_path: PathBuf,
    pub n: usize,
    pub mean_abs: Vec<f64>,
}

/// Draw latents from the base density and invert the stack.
pub fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    tol: f64,
    max_iter: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<SampleReport> {
    anyhow::ensure!(n >= 1, "need at least one sample");
    let ckpt = load_for_eval(checkpoint)?;
    let d = ckpt.model.d();
    let seed = seed.unwrap_or(ckpt.config.seed).wrapping_add(SAMPLE_STREAM);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[n, d], 1.0, &mut rng);
    let x = invert_model(&ckpt.model, &z, tol, max_iter)?;

    std::fs::create_dir_all(out)?;
    let path = out.join("samples.csv");
    let mut csv = String::new();
    writeln!(csv, "{}", (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(","))?;
    for row in 0..n {
        let vals: Vec<String> = (0..d)
            .map(|j| format!("{:.6}", x.data()[row * d + j]))
            .collect();
        writeln!(csv, "{}", vals.join(","))?;
    }
    std::fs::write(&path, csv)?;

    let mut mean_abs = vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            mean_abs[j] += x.data()[row * d + j];
        }
    }
    for m in &mut mean_abs {
        *m = (*m / n as f64).abs();
    }
    println!("wrote {n} samples to {}", path.display());
    Ok(SampleReport {
        samples_path: path,
        n,
        mean_abs,
    })
}

/// Maximum round-trip error over `n` dataset points.
pub fn cmd_invert_check(checkpoint: &Path, n: usize, tol: f64, max_iter: usize) -> Result<f64> {
    let ckpt = load_for_eval(checkpoint)?;
    let kind = ckpt.config.dataset_kind()?;
    let mut rng = ChaCha12Rng::seed_from_u64(ckpt.config.seed.wrapping_add(SAMPLE_STREAM));
    let x = sample_toy(kind, n, &mut rng);
    let err = round_trip_error(&ckpt.model, &x, tol, max_iter)?;
    println!("max round-trip error over {n} points: {err:.3e}");
    Ok(err)
}

pub struct GridReport {
    pub csv_path: PathBuf,
    pub ppm_path: PathBuf,
    pub resolution: usize,
    /// Riemann-sum probability mass inside the bounds.
    pub mass: f64,
    /// Row-major densities, y decreasing (image order).
    pub densities: Vec<f64>,
}

/// Evaluate the exact log-density on a square grid; write CSV and a P6 heat
/// image. Cell centers are used, so the Riemann sum approximates the mass in
/// the bounds.
pub fn cmd_density_grid(
    checkpoint: &Path,
    bounds: (f64, f64, f64, f64),
    resolution: usize,
    out: &Path,
) -> Result<GridReport> {
    anyhow::ensure!(resolution >= 2, "resolution must be at least 2");
    let (x_lo, x_hi, y_lo, y_hi) = bounds;
    anyhow::ensure!(x_hi > x_lo && y_hi > y_lo, "bounds must be increasing");
    let ckpt = load_for_eval(checkpoint)?;
    anyhow::ensure!(ckpt.model.d() == 2, "density grids are 2-D");

    let dx = (x_hi - x_lo) / resolution as f64;
    let dy = (y_hi - y_lo) / resolution as f64;
    let mut rng = ChaCha12Rng::seed_from_u64(ckpt.config.seed);
    let mut csv = String::from("x1,x2,logp,p\n");
    // Image rows run top (max y) to bottom.
    let mut densities = Vec::with_capacity(resolution * resolution);
    let mut mass = 0.0;
    for row in 0..resolution {
        let y = y_hi - dy * (row as f64 + 0.5);
        let mut points = Vec::with_capacity(resolution * 2);
        for col in 0..resolution {
            let x = x_lo + dx * (col as f64 + 0.5);
            points.push(x);
            points.push(y);
        }
        let batch = Tensor::new(vec![resolution, 2], points)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(batch);
        let (logp, _) = log_prob_rows(&ckpt.model, &mut tape, xv, &Estimator::Exact, &mut rng)?;
        let logps = tape.value(logp).data().to_vec();
        for (col, lp) in logps.iter().enumerate() {
            let x = x_lo + dx * (col as f64 + 0.5);
            let p = lp.exp();
            mass += p * dx * dy;
            densities.push(p);
            writeln!(csv, "{x:.6},{y:.6},{lp:.6},{p:.6e}")?;
        }
    }

    std::fs::create_dir_all(out)?;
    let csv_path = out.join("density_grid.csv");
    std::fs::write(&csv_path, csv)?;
    let peak = densities.iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
    let intensities: Vec<f64> = densities.iter().map(|p| p / peak).collect();
    let ppm_path = out.join("density_grid.ppm");
    ppm::write_p6(&ppm_path, resolution, resolution, &intensities)?;
    println!(
        "grid {resolution}x{resolution}, mass in bounds {mass:.4}; wrote {} and {}",
        csv_path.display(),
        ppm_path.display()
    );
    Ok(GridReport {
        csv_path,
        ppm_path,
        resolution,
        mass,
        densities,
    })
}

/// Distance-ratio table over activations and dimensions; CSV mirror of the
/// signal-preservation grid.
pub fn cmd_analyze(
    scale: f64,
    dims: &[usize],
    n_pairs: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let csv = table_report(
        dims,
        &denseflow::ratios::default_activations(),
        n_pairs,
        scale,
        &mut rng,
    )?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ratios.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(csv)
}

/// Certified Lipschitz bounds for an activation across slope parameters.
pub fn cmd_bound(activation: &str, betas: &[f64]) -> Result<Vec<(f64, f64)>> {
    let spec = ActivationSpec::parse(activation)?;
    let betas = if betas.is_empty() {
        vec![beta_init_effective()]
    } else {
        betas.to_vec()
    };
    let mut rows = Vec::with_capacity(betas.len());
    println!("activation,beta,bound");
    for &beta in &betas {
        let bound = certified_bound(spec, beta)?;
        println!("{},{beta},{bound:.7}", spec.name());
        rows.push((beta, bound));
    }
    Ok(rows)
}
