//! Activation functions with learnable parameters and certified Lipschitz bounds.
//!
//! Every activation used inside a flow block must be at most 1-Lipschitz. The
//! concatenating variants (`CRelu`, `CLipSwish`) double the feature dimension;
//! `CLipSwish` divides by a numerically certified supremum of its Jacobian
//! norm, which is ~1.004 independent of the slope parameter.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, softplus, Tensor};

/// Raw beta at initialization; the effective beta is softplus of this
/// (~0.9741). Matching the distance-ratio reference grid pins this reading.
pub const RAW_BETA_INIT: f64 = 0.5;
/// Effective beta at initialization.
pub fn beta_init_effective() -> f64 {
    softplus(RAW_BETA_INIT)
}
/// Raw alpha at initialization; the effective alpha is sigmoid of this.
pub const RAW_ALPHA_INIT: f64 = -3.0;

/// Activation kind without parameter bindings; used in configs and analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationSpec {
    Identity,
    Sigmoid,
    Relu,
    CRelu,
    LipSwish,
    LeakyLSwish,
    CLipSwish,
}

impl ActivationSpec {
    /// Output features per input feature (2 for concatenating activations).
    pub fn width_factor(self) -> usize {
        match self {
            ActivationSpec::CRelu | ActivationSpec::CLipSwish => 2,
            _ => 1,
        }
    }

    /// The Lipschitz constant the implementation certifies.
    pub fn lipschitz_constant(self) -> f64 {
        match self {
            ActivationSpec::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationSpec::Identity => "identity",
            ActivationSpec::Sigmoid => "sigmoid",
            ActivationSpec::Relu => "relu",
            ActivationSpec::CRelu => "crelu",
            ActivationSpec::LipSwish => "lipswish",
            ActivationSpec::LeakyLSwish => "leakylswish",
            ActivationSpec::CLipSwish => "clipswish",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(ActivationSpec::Identity),
            "sigmoid" => Ok(ActivationSpec::Sigmoid),
            "relu" => Ok(ActivationSpec::Relu),
            "crelu" => Ok(ActivationSpec::CRelu),
            "lipswish" => Ok(ActivationSpec::LipSwish),
            "leakylswish" => Ok(ActivationSpec::LeakyLSwish),
            "clipswish" => Ok(ActivationSpec::CLipSwish),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }

    /// Apply with parameters frozen at their initialization values (beta 0.5,
    /// alpha sigmoid(-3)); used by the signal-preservation analysis.
    pub fn apply_default(self, tape: &mut Tape, x: Var) -> Result<Var> {
        let act = Activation::unbound(self);
        act.apply(tape, &ParamStore::new(), x)
    }
}

/// An activation bound to (optional) learnable parameters in a store.
///
/// When the parameter handles are absent the initialization values are used,
/// which keeps the function usable standalone in analysis code.
#[derive(Clone, Debug)]
pub struct Activation {
    pub spec: ActivationSpec,
    pub raw_beta: Option<ParamId>,
    pub raw_alpha: Option<ParamId>,
}

impl Activation {
    /// Bind learnable parameters as the kind requires, creating them in `store`.
    pub fn bound(spec: ActivationSpec, store: &mut ParamStore, prefix: &str) -> Self {
        let raw_beta = match spec {
            ActivationSpec::LipSwish | ActivationSpec::LeakyLSwish | ActivationSpec::CLipSwish => {
                Some(store.create(format!("{prefix}.beta"), Tensor::scalar(RAW_BETA_INIT)))
            }
            _ => None,
        };
        let raw_alpha = match spec {
            ActivationSpec::LeakyLSwish => {
                Some(store.create(format!("{prefix}.alpha"), Tensor::scalar(RAW_ALPHA_INIT)))
            }
            _ => None,
        };
        Activation {
            spec,
            raw_beta,
            raw_alpha,
        }
    }

    /// No learnable parameters; initialization values are used throughout.
    pub fn unbound(spec: ActivationSpec) -> Self {
        Activation {
            spec,
            raw_beta: None,
            raw_alpha: None,
        }
    }

    /// Current effective beta (softplus of the raw parameter).
    pub fn beta(&self, store: &ParamStore) -> f64 {
        match self.raw_beta {
            Some(id) => softplus(store.value(id).data()[0]),
            None => beta_init_effective(),
        }
    }

    /// Current effective alpha (sigmoid of the raw parameter).
    pub fn alpha(&self, store: &ParamStore) -> f64 {
        match self.raw_alpha {
            Some(id) => sigmoid(store.value(id).data()[0]),
            None => sigmoid(RAW_ALPHA_INIT),
        }
    }

    fn beta_var(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let raw = match self.raw_beta {
            Some(id) => tape.param(store, id),
            None => tape.leaf(Tensor::scalar(RAW_BETA_INIT)),
        };
        tape.softplus(raw)
    }

    fn alpha_var(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let raw = match self.raw_alpha {
            Some(id) => tape.param(store, id),
            None => tape.leaf(Tensor::scalar(RAW_ALPHA_INIT)),
        };
        tape.sigmoid(raw)
    }

    /// Record the activation on the tape. Doubling kinds return a tensor with
    /// twice the feature dimension.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self.spec {
            ActivationSpec::Identity => Ok(x),
            ActivationSpec::Sigmoid => Ok(tape.sigmoid(x)),
            ActivationSpec::Relu => Ok(tape.relu(x)),
            ActivationSpec::CRelu => {
                let pos = tape.relu(x);
                let nx = tape.neg(x);
                let neg = tape.relu(nx);
                tape.concat_features(pos, neg)
            }
            ActivationSpec::LipSwish => {
                let beta = self.beta_var(tape, store);
                lipswish_on_tape(tape, x, beta)
            }
            ActivationSpec::LeakyLSwish => {
                let beta = self.beta_var(tape, store);
                let alpha = self.alpha_var(tape, store);
                let ls = lipswish_on_tape(tape, x, beta)?;
                let ax = tape.scalar_mul(alpha, x)?;
                let na = tape.neg(alpha);
                let one_minus = tape.add_const(na, 1.0);
                let rest = tape.scalar_mul(one_minus, ls)?;
                tape.add(ax, rest)
            }
            ActivationSpec::CLipSwish => {
                let bound = clipswish_bound(self.beta(store))?;
                let beta = self.beta_var(tape, store);
                let upper = lipswish_on_tape(tape, x, beta)?;
                let nx = tape.neg(x);
                let lower = lipswish_on_tape(tape, nx, beta)?;
                let cat = tape.concat_features(upper, lower)?;
                Ok(tape.scale(cat, 1.0 / bound))
            }
        }
    }

    /// Evaluate on a plain tensor with a scratch tape.
    pub fn apply_value(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = self.apply(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// `x * sigmoid(beta x) / 1.1` recorded on the tape; beta is a rank-0 var.
fn lipswish_on_tape(tape: &mut Tape, x: Var, beta: Var) -> Result<Var> {
    let bx = tape.scalar_mul(beta, x)?;
    let s = tape.sigmoid(bx);
    let xs = tape.mul(x, s)?;
    Ok(tape.scale(xs, 1.0 / 1.1))
}

/// Scalar LipSwish value.
pub fn lipswish_scalar(x: f64, beta: f64) -> f64 {
    x * sigmoid(beta * x) / 1.1
}

/// Scalar LipSwish derivative.
pub fn lipswish_slope(x: f64, beta: f64) -> f64 {
    let s = sigmoid(beta * x);
    s * (1.0 + beta * x * (1.0 - s)) / 1.1
}

/// Scalar LeakyLSwish value: `alpha x + (1 - alpha) LipSwish(x)`.
pub fn leakylswish_scalar(x: f64, alpha: f64, beta: f64) -> f64 {
    alpha * x + (1.0 - alpha) * lipswish_scalar(x, beta)
}

/// Maximize a unimodal-enough objective by grid scan plus golden-section
/// refinement around the best cell. `tol` is absolute on the argument.
fn maximize(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize, tol: f64) -> (f64, f64) {
    let step = (hi - lo) / grid as f64;
    let mut best_x = lo;
    let mut best_v = f(lo);
    for i in 1..=grid {
        let x = lo + step * i as f64;
        let v = f(x);
        if v > best_v {
            best_v = v;
            best_x = x;
        }
    }
    // Golden-section on the bracketing cells.
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut a = (best_x - step).max(lo);
    let mut b = (best_x + step).min(hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let v = f(x);
    if v > best_v {
        (x, v)
    } else {
        (best_x, best_v)
    }
}

/// Supremum over x of the Jacobian norm of the pair [LipSwish(x); LipSwish(-x)],
/// i.e. `sup_x sqrt(ls'(x)^2 + ls'(-x)^2)`. Numerically ~1.004, independent of
/// beta; the extremum x-coordinate scales as 1/beta, hence the search window.
pub fn clipswish_bound(beta: f64) -> Result<f64> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Numeric {
            op: "clipswish_bound",
            msg: format!("beta must be strictly positive, got {beta}"),
        });
    }
    let half = 50.0 / beta;
    let f = |x: f64| {
        let a = lipswish_slope(x, beta);
        let b = lipswish_slope(-x, beta);
        (a * a + b * b).sqrt()
    };
    let (_, v) = maximize(f, -half, half, 4000, 1e-7 / beta.max(1.0));
    Ok(v)
}

/// Supremum over x of |phi'(x)| for a scalar activation; the certified bound
/// reported for non-concatenating kinds.
pub fn scalar_slope_bound(spec: ActivationSpec, beta: f64) -> Result<f64> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::Numeric {
            op: "scalar_slope_bound",
            msg: format!("beta must be strictly positive, got {beta}"),
        });
    }
    let half = 50.0 / beta;
    Ok(match spec {
        ActivationSpec::Identity | ActivationSpec::Relu => 1.0,
        ActivationSpec::Sigmoid => 0.25,
        ActivationSpec::LipSwish => {
            maximize(|x| lipswish_slope(x, beta).abs(), -half, half, 4000, 1e-7).1
        }
        ActivationSpec::LeakyLSwish => {
            let alpha = sigmoid(RAW_ALPHA_INIT);
            maximize(
                |x| (alpha + (1.0 - alpha) * lipswish_slope(x, beta)).abs(),
                -half,
                half,
                4000,
                1e-7,
            )
            .1
        }
        ActivationSpec::CRelu | ActivationSpec::CLipSwish => {
            return Err(Error::InvalidConfig(format!(
                "{} is a pair activation; use pair_bound",
                spec.name()
            )))
        }
    })
}

/// Certified Lipschitz bound of the raw (pre-division) activation map, as
/// reported by the `bound` command. For pair activations this is the
/// concatenated-pair supremum; CReLU is exactly 1 by case analysis.
pub fn certified_bound(spec: ActivationSpec, beta: f64) -> Result<f64> {
    match spec {
        ActivationSpec::CRelu => Ok(1.0),
        ActivationSpec::CLipSwish => clipswish_bound(beta),
        _ => scalar_slope_bound(spec, beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn apply_vec(spec: ActivationSpec, xs: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs.to_vec()));
        let y = spec.apply_default(&mut tape, x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn lipswish_at_zero_is_zero() {
        for beta in [0.1, 0.5, 2.0] {
            assert_eq!(lipswish_scalar(0.0, beta), 0.0);
        }
        assert_eq!(apply_vec(ActivationSpec::LipSwish, &[0.0]), vec![0.0]);
    }

    #[test]
    fn lipswish_known_value() {
        // Direct evaluation: sigmoid(0.5)/1.1 at x = 1.
        let expect = sigmoid(0.5) / 1.1;
        assert!((expect - 0.5658721192744133).abs() < 1e-15);
        assert!((lipswish_scalar(1.0, 0.5) - expect).abs() < 1e-15);
        // The tape path applies the initialization beta, softplus(0.5).
        let through_tape = apply_vec(ActivationSpec::LipSwish, &[1.0])[0];
        let expect_init = lipswish_scalar(1.0, beta_init_effective());
        assert!((through_tape - expect_init).abs() < 1e-15);
    }

    #[test]
    fn lipswish_empirical_slope_at_most_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20_000 {
            let a: f64 = rng.random_range(-8.0..8.0);
            let b: f64 = rng.random_range(-8.0..8.0);
            if a == b {
                continue;
            }
            let r = (lipswish_scalar(a, 0.5) - lipswish_scalar(b, 0.5)).abs() / (a - b).abs();
            assert!(r <= 1.0 + 1e-9, "slope {r} at ({a},{b})");
        }
    }

    #[test]
    fn clipswish_zero_maps_to_zero_pair() {
        assert_eq!(apply_vec(ActivationSpec::CLipSwish, &[0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn clipswish_doubles_dimension() {
        let out = apply_vec(ActivationSpec::CLipSwish, &[0.3, -1.0, 2.0]);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn clipswish_halves_match_definition() {
        let beta = beta_init_effective();
        let bound = clipswish_bound(beta).unwrap();
        let xs = [-2.0, -0.3, 0.0, 0.7, 3.1];
        let out = apply_vec(ActivationSpec::CLipSwish, &xs);
        for (i, &x) in xs.iter().enumerate() {
            assert!((out[i] - lipswish_scalar(x, beta) / bound).abs() < 1e-15);
            assert!(
                (out[xs.len() + i] - lipswish_scalar(-x, beta) / bound).abs() < 1e-15
            );
        }
    }

    #[test]
    fn clipswish_empirical_lipschitz_at_most_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let beta = beta_init_effective();
        let bound = clipswish_bound(beta).unwrap();
        for _ in 0..100_000 {
            let a: f64 = rng.random_range(-10.0..10.0);
            let b: f64 = rng.random_range(-10.0..10.0);
            if a == b {
                continue;
            }
            let fa = [
                lipswish_scalar(a, beta) / bound,
                lipswish_scalar(-a, beta) / bound,
            ];
            let fb = [
                lipswish_scalar(b, beta) / bound,
                lipswish_scalar(-b, beta) / bound,
            ];
            let num = ((fa[0] - fb[0]).powi(2) + (fa[1] - fb[1]).powi(2)).sqrt();
            let r = num / (a - b).abs();
            assert!(r <= 1.0 + 1e-9, "ratio {r} at ({a},{b})");
        }
    }

    #[test]
    fn clipswish_bound_near_one_point_oh_four() {
        let b = clipswish_bound(0.5).unwrap();
        assert!((b - 1.004).abs() < 1e-3, "bound {b}");
        // Frozen from an independent dense grid scan.
        assert!((b - 1.0039650400302265).abs() < 1e-7, "bound {b}");
    }

    #[test]
    fn clipswish_bound_is_beta_independent_and_below_sqrt2() {
        let reference = clipswish_bound(0.5).unwrap();
        for beta in [0.1, 1.0, 2.0, 5.0] {
            let b = clipswish_bound(beta).unwrap();
            assert!((b - reference).abs() < 1e-6, "beta {beta}: {b} vs {reference}");
            assert!(b < 2.0_f64.sqrt());
        }
        assert!(clipswish_bound(-1.0).is_err());
        assert!(clipswish_bound(0.0).is_err());
    }

    #[test]
    fn crelu_matches_definition_and_is_one_lipschitz() {
        assert_eq!(apply_vec(ActivationSpec::CRelu, &[0.0]), vec![0.0, 0.0]);
        assert_eq!(apply_vec(ActivationSpec::CRelu, &[-2.0]), vec![0.0, 2.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50_000 {
            let a: f64 = rng.random_range(-5.0..5.0);
            let b: f64 = rng.random_range(-5.0..5.0);
            if a == b {
                continue;
            }
            let fa = [a.max(0.0), (-a).max(0.0)];
            let fb = [b.max(0.0), (-b).max(0.0)];
            let num = ((fa[0] - fb[0]).powi(2) + (fa[1] - fb[1]).powi(2)).sqrt();
            assert!(num <= (a - b).abs() + 1e-12);
        }
    }

    #[test]
    fn leakylswish_zero_and_alpha_limits() {
        assert_eq!(leakylswish_scalar(0.0, 0.3, 0.5), 0.0);
        // alpha -> 1 collapses to the identity.
        for &x in &[-2.0, 0.4, 1.7] {
            assert!((leakylswish_scalar(x, 1.0, 0.5) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn leakylswish_initialization_mimics_lipswish() {
        let alpha = sigmoid(RAW_ALPHA_INIT);
        assert!((alpha - 0.047).abs() < 1e-3);
        let beta = beta_init_effective();
        let mut max_gap: f64 = 0.0;
        let mut x = -3.0;
        while x <= 3.0 {
            let gap = (leakylswish_scalar(x, alpha, beta) - lipswish_scalar(x, beta)).abs();
            max_gap = max_gap.max(gap);
            x += 0.01;
        }
        // alpha*|x - LipSwish(x)| stays small on [-3, 3].
        assert!(max_gap < 0.2, "max gap {max_gap}");
    }

    #[test]
    fn sigmoid_symmetry_and_softplus_bounds() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[0.3, 1.0, 4.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
        }
        let mut prev = f64::NEG_INFINITY;
        let mut x = -6.0;
        while x <= 6.0 {
            let s = crate::tensor::softplus(x);
            assert!(s > x.max(0.0));
            assert!(s > prev);
            prev = s;
            x += 0.25;
        }
    }

    #[test]
    fn clipswish_vjp_matches_finite_differences() {
        let xs = [-2.2, -0.5, 0.0, 0.9, 3.0];
        let h = 1e-5;
        for i in 0..xs.len() {
            let mut seed = vec![0.0; 2 * xs.len()];
            // Check both output halves against each input coordinate.
            for half in 0..2 {
                seed.iter_mut().for_each(|v| *v = 0.0);
                seed[half * xs.len() + i] = 1.0;
                let grad = crate::tape::vjp_fn(
                    |t, x| ActivationSpec::CLipSwish.apply_default(t, x),
                    &Tensor::vector(xs.to_vec()),
                    &Tensor::vector(seed.clone()),
                )
                .unwrap();
                let mut xp = xs.to_vec();
                xp[i] += h;
                let fp = apply_vec(ActivationSpec::CLipSwish, &xp)[half * xs.len() + i];
                xp[i] -= 2.0 * h;
                let fm = apply_vec(ActivationSpec::CLipSwish, &xp)[half * xs.len() + i];
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (grad.data()[i] - fd).abs() < 1e-8,
                    "d out[{half}][{i}] / d x[{i}]: {} vs {fd}",
                    grad.data()[i]
                );
            }
        }
    }

    #[test]
    fn certified_bounds_by_kind() {
        assert_eq!(certified_bound(ActivationSpec::CRelu, 0.5).unwrap(), 1.0);
        assert_eq!(certified_bound(ActivationSpec::Identity, 0.5).unwrap(), 1.0);
        assert_eq!(certified_bound(ActivationSpec::Sigmoid, 0.5).unwrap(), 0.25);
        let ls = certified_bound(ActivationSpec::LipSwish, 0.5).unwrap();
        assert!(ls <= 1.0 && ls > 0.999, "lipswish sup slope {ls}");
    }
}
