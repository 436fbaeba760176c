//! Invertible dense-block normalizing flows with certified Lipschitz bounds.
//!
//! The crate trains contraction-residual flows built from densely connected
//! layers by exact maximum likelihood on 2-D toy densities, and provides the
//! supporting machinery: a minimal reverse-mode tape, spectrally normalized
//! weights, exact and stochastic log-determinant estimators, fixed-point
//! inversion, and signal-preservation analysis for the activation functions.

pub mod activations;
pub mod likelihood;
pub mod lipschitz;
pub mod error;
pub mod flow;
pub mod inversion;
pub mod optim;
pub mod params;
pub mod ratios;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod toydata;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
