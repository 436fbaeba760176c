//! Error type shared by the whole crate.

use thiserror::Error;

/// Errors produced by tensor ops, the tape, model construction, and estimators.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("shape mismatch in {op}: left shape {lhs:?} vs right shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op received a tensor whose shape it cannot handle.
    #[error("{op}: unsupported shape {shape:?} ({msg})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// Backward was seeded from a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A numeric domain violation (log of non-positive, division by zero, exp overflow).
    #[error("{op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    /// det(I + J_g) was not strictly positive; the residual branch is not a contraction.
    #[error("det(I + J_g) = {det:.6e} is not positive; Lipschitz constraint violated")]
    NonInvertibleJacobian { det: f64 },

    /// Fixed-point inversion ran out of iterations.
    #[error(
        "fixed-point inversion of block {block} did not reach tol within {max_iter} iterations \
         (last residual {residual:.3e}); Lipschitz violation or too-tight tolerance"
    )]
    InversionDiverged {
        block: usize,
        max_iter: usize,
        residual: f64,
    },

    /// Model or run configuration rejected.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The requested log-det estimator cannot be used in this setting.
    #[error("estimator {estimator} invalid for dimension {d}: {reason}")]
    InvalidEstimator {
        estimator: &'static str,
        d: usize,
        reason: String,
    },

    /// Optimizer state does not match the parameter store.
    #[error("optimizer state not initialized for current parameters: {0}")]
    UninitializedOptimizer(String),
}

pub type Result<T> = std::result::Result<T, Error>;
