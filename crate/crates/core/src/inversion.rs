//! Fixed-point inversion of contraction-residual blocks.
//!
//! With `Lip(g) < 1` the Banach fixed-point iteration
//! `x_(k+1) = y - g(x_k)` started at `x_0 = y` converges geometrically to the
//! unique preimage of `y` under `F(x) = x + g(x)`.

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::tensor::Tensor;

/// Default convergence tolerance on the sup-norm iterate delta.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default iteration cap; a config knob, not a guarantee.
pub const DEFAULT_MAX_ITER: usize = 100;

/// Invert one block on a `[rows, d]` batch of outputs.
pub fn invert_block(
    model: &FlowModel,
    block: usize,
    y: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<Tensor> {
    if tol <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "inversion tolerance must be positive, got {tol}"
        )));
    }
    let mut x = y.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let g = model.g_batch(block, &x)?;
        let next = y.sub(&g)?;
        residual = next.sub(&x)?.norm_inf();
        x = next;
        if residual < tol {
            return Ok(x);
        }
    }
    Err(Error::InversionDiverged {
        block,
        max_iter,
        residual,
    })
}

/// Invert the whole stack: map latents back to data space block by block in
/// reverse order. Errors carry the failing block index.
pub fn invert_model(
    model: &FlowModel,
    z: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<Tensor> {
    let mut y = z.clone();
    for block in (0..model.blocks.len()).rev() {
        y = invert_block(model, block, &y, tol, max_iter)?;
    }
    Ok(y)
}

/// Maximum sup-norm round-trip error `max_rows |x - F^-1(F(x))|_inf`.
pub fn round_trip_error(
    model: &FlowModel,
    x: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let z = model.forward_batch(x)?;
    let back = invert_model(model, &z, tol, max_iter)?;
    Ok(back.sub(x)?.norm_inf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_model, Block, ModelConfig};
    use crate::params::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 2,
            blocks: 4,
            depth: 2,
            growth: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_branch_inverts_in_one_iteration() {
        let mut model = build_model(&small_config(), 1).unwrap();
        let ids: Vec<ParamId> = model
            .blocks
            .iter()
            .flat_map(|b| b.spectral_weights().into_iter().map(|w| w.param))
            .collect();
        for id in ids {
            let p = model.params.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        model.refresh_spectral(5).unwrap();
        let y = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.0, 3.0, 4.0]).unwrap();
        let x = invert_block(&model, 0, &y, 1e-12, 2).unwrap();
        assert_eq!(x, y);
        let x = invert_model(&model, &y, 1e-12, 2).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn linear_half_branch_recovers_closed_form() {
        // g(x) = 0.5 x so F(x) = 1.5 x; inverting y = 3 gives 2 with
        // contraction ratio one half.
        let config = ModelConfig {
            d: 1,
            blocks: 1,
            depth: 0,
            growth: 0,
            ..small_config()
        };
        let mut model = build_model(&config, 2).unwrap();
        let Block::Dense(block) = &model.blocks[0] else {
            panic!()
        };
        let pid = block.proj.param;
        model.params.get_mut(pid).value = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        model.refresh_spectral(50).unwrap();

        let y = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let x = invert_block(&model, 0, &y, 1e-10, 100).unwrap();
        assert!((x.data()[0] - 2.0).abs() < 1e-9);

        // Geometric convergence at ratio 0.5: residuals halve each step.
        let mut xk = y.clone();
        let mut deltas = Vec::new();
        for _ in 0..8 {
            let g = model.g_batch(0, &xk).unwrap();
            let next = y.sub(&g).unwrap();
            deltas.push(next.sub(&xk).unwrap().norm_inf());
            xk = next;
        }
        for w in deltas.windows(2) {
            if w[0] > 1e-12 {
                assert!((w[1] / w[0] - 0.5).abs() < 1e-6, "ratio {}", w[1] / w[0]);
            }
        }
    }

    #[test]
    fn iteration_count_obeys_contraction_rate_bound() {
        let config = ModelConfig {
            d: 1,
            blocks: 1,
            depth: 0,
            growth: 0,
            ..small_config()
        };
        let mut model = build_model(&config, 3).unwrap();
        let Block::Dense(block) = &model.blocks[0] else {
            panic!()
        };
        let pid = block.proj.param;
        let a = 0.7;
        model.params.get_mut(pid).value = Tensor::matrix(1, 1, vec![a]).unwrap();
        model.refresh_spectral(50).unwrap();

        let y = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let tol = 1e-8;
        // First delta is |g(y)| = a*|y|; each later delta contracts by a.
        let first = a * 2.0;
        let bound = ((tol / first).ln() / a.ln()).ceil() as usize + 1;
        let mut xk = y.clone();
        let mut iters = 0;
        loop {
            let g = model.g_batch(0, &xk).unwrap();
            let next = y.sub(&g).unwrap();
            let delta = next.sub(&xk).unwrap().norm_inf();
            xk = next;
            iters += 1;
            if delta < tol {
                break;
            }
            assert!(iters < 200);
        }
        assert!(iters <= bound, "took {iters} > bound {bound}");
    }

    #[test]
    fn round_trip_recovers_random_inputs() {
        let model = build_model(&small_config(), 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = Tensor::randn(&[200, 2], 1.5, &mut rng);
        let err = round_trip_error(&model, &x, 1e-6, 100).unwrap();
        assert!(err < 1e-4, "round-trip error {err}");
    }

    #[test]
    fn residual_shrinks_monotonically_after_first_step() {
        let model = build_model(&small_config(), 6).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let y = Tensor::randn(&[16, 2], 1.0, &mut rng);
        let mut x = y.clone();
        let mut prev = f64::INFINITY;
        for k in 0..30 {
            let g = model.g_batch(0, &x).unwrap();
            let next = y.sub(&g).unwrap();
            let delta = next.sub(&x).unwrap().norm_inf();
            x = next;
            if k > 0 && prev > 1e-14 {
                assert!(delta <= prev + 1e-14, "step {k}: {delta} > {prev}");
            }
            prev = delta;
        }
    }

    #[test]
    fn divergence_error_carries_block_and_residual() {
        let model = build_model(&small_config(), 8).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.4, -0.6]).unwrap();
        // One iteration cannot reach 1e-12 on a nontrivial block.
        let err = invert_block(&model, 2, &y, 1e-13, 1).unwrap_err();
        match err {
            Error::InversionDiverged {
                block,
                max_iter,
                residual,
            } => {
                assert_eq!(block, 2);
                assert_eq!(max_iter, 1);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }
}
