//! Analytic and empirical Lipschitz machinery.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Exact spectral norm oracle: power iteration on `W^T W` run to a 1e-12
/// residual from five random starts. Independent of the persistent-state
/// estimate used in forward passes.
pub fn exact_spectral_norm(w: &Tensor) -> f64 {
    let shape = w.shape();
    assert_eq!(shape.len(), 2, "exact_spectral_norm wants a matrix");
    let gram = w
        .transpose()
        .expect("matrix")
        .matmul(w)
        .expect("shapes agree");
    let n = gram.shape()[0];
    let gd = gram.data();
    let mut best = 0.0_f64;
    for restart in 0..5 {
        let mut rng = ChaCha12Rng::seed_from_u64(0x5eed + restart);
        let mut z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        z.iter_mut().for_each(|x| *x /= norm);
        let mut lambda = 0.0_f64;
        for _ in 0..10_000 {
            let mut bz = vec![0.0; n];
            for i in 0..n {
                bz[i] = gd[i * n..(i + 1) * n]
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let new_lambda: f64 = z.iter().zip(&bz).map(|(a, b)| a * b).sum();
            let bz_norm = bz.iter().map(|x| x * x).sum::<f64>().sqrt();
            if bz_norm == 0.0 {
                lambda = 0.0;
                break;
            }
            z = bz.iter().map(|x| x / bz_norm).collect();
            if (new_lambda - lambda).abs() <= 1e-12 * new_lambda.abs().max(1.0) {
                lambda = new_lambda;
                break;
            }
            lambda = new_lambda;
        }
        best = best.max(lambda.max(0.0).sqrt());
    }
    best
}

/// Lipschitz bound of a feature concatenation with known part constants:
/// `(K1^p + K2^p)^(1/p)` for any p-norm with p >= 1.
pub fn concat_lipschitz_bound(k1: f64, k2: f64, p: f64) -> Result<f64> {
    if p < 1.0 {
        return Err(Error::Numeric {
            op: "concat_lipschitz_bound",
            msg: format!("p must be at least 1, got {p}"),
        });
    }
    if k1 < 0.0 || k2 < 0.0 {
        return Err(Error::Numeric {
            op: "concat_lipschitz_bound",
            msg: "part constants must be non-negative".into(),
        });
    }
    Ok((k1.powf(p) + k2.powf(p)).powf(1.0 / p))
}

/// Sampled distance-ratio statistics of a map on pairs drawn from
/// `Normal(0, scale^2)^dim`. Returns `(mean_ratio, max_ratio)` over
/// `n_pairs` pairs; coincident pairs are resampled.
///
/// `f` maps a `[rows, dim]` batch to a `[rows, out]` batch; pairs are
/// processed in chunks so large pair counts stay cheap.
pub fn empirical_lipschitz<F>(
    f: F,
    dim: usize,
    n_pairs: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64)>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(n_pairs >= 1, "need at least one pair");
    const CHUNK: usize = 2048;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut done = 0;
    while done < n_pairs {
        let rows = CHUNK.min(n_pairs - done);
        let mut v = Tensor::randn(&[rows, dim], scale, rng);
        let mut w = Tensor::randn(&[rows, dim], scale, rng);
        // Resample any coincident pair; distances of zero are not ratios.
        loop {
            let mut any = false;
            for r in 0..rows {
                let vd = &v.data()[r * dim..(r + 1) * dim];
                let wd = &w.data()[r * dim..(r + 1) * dim];
                if vd == wd {
                    any = true;
                    let fresh_v = Tensor::randn(&[dim], scale, rng);
                    let fresh_w = Tensor::randn(&[dim], scale, rng);
                    v.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(fresh_v.data());
                    w.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(fresh_w.data());
                }
            }
            if !any {
                break;
            }
        }
        let fv = f(&v)?;
        let fw = f(&w)?;
        let out = fv.last_dim()?;
        for r in 0..rows {
            let num = dist(
                &fv.data()[r * out..(r + 1) * out],
                &fw.data()[r * out..(r + 1) * out],
            );
            let den = dist(
                &v.data()[r * dim..(r + 1) * dim],
                &w.data()[r * dim..(r + 1) * dim],
            );
            let ratio = num / den;
            sum += ratio;
            max = max.max(ratio);
        }
        done += rows;
    }
    Ok((sum / n_pairs as f64, max))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
