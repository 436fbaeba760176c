//! 2-D toy density generators.
//!
//! The generators are deterministic per seed and frozen here so results are
//! reproducible within this artifact: two noisy interleaved semicircles, two
//! concentric noisy circles, and a checkerboard of eight unit cells.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Toy dataset selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyDatasetKind {
    TwoCircles,
    Checkerboard,
    TwoMoons,
}

impl ToyDatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyDatasetKind::TwoCircles => "two_circles",
            ToyDatasetKind::Checkerboard => "checkerboard",
            ToyDatasetKind::TwoMoons => "two_moons",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "two_circles" | "2circles" | "circles" => Ok(ToyDatasetKind::TwoCircles),
            "checkerboard" => Ok(ToyDatasetKind::Checkerboard),
            "two_moons" | "2moons" | "moons" => Ok(ToyDatasetKind::TwoMoons),
            other => Err(Error::InvalidConfig(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn all() -> [ToyDatasetKind; 3] {
        [
            ToyDatasetKind::TwoCircles,
            ToyDatasetKind::Checkerboard,
            ToyDatasetKind::TwoMoons,
        ]
    }
}

/// Draw `n` points as an `[n, 2]` tensor.
pub fn sample_toy(kind: ToyDatasetKind, n: usize, rng: &mut impl Rng) -> Tensor {
    assert!(n >= 1, "need at least one sample");
    let mut data = Vec::with_capacity(n * 2);
    match kind {
        ToyDatasetKind::TwoMoons => {
            for i in 0..n {
                let t: f64 = rng.random_range(0.0..PI);
                let (mut x, mut y) = if i % 2 == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                x += 0.1 * rng.sample::<f64, _>(StandardNormal);
                y += 0.1 * rng.sample::<f64, _>(StandardNormal);
                data.push(2.0 * x - 1.0);
                data.push(2.0 * y - 0.2);
            }
        }
        ToyDatasetKind::TwoCircles => {
            for i in 0..n {
                let theta: f64 = rng.random_range(0.0..2.0 * PI);
                let r = if i % 2 == 0 { 1.0 } else { 0.5 };
                let x = r * theta.cos() + 0.08 * rng.sample::<f64, _>(StandardNormal);
                let y = r * theta.sin() + 0.08 * rng.sample::<f64, _>(StandardNormal);
                data.push(3.0 * x);
                data.push(3.0 * y);
            }
        }
        ToyDatasetKind::Checkerboard => {
            for _ in 0..n {
                let x1: f64 = rng.random_range(-2.0..2.0);
                let u: f64 = rng.random_range(0.0..1.0);
                let b = if rng.random::<bool>() { 1.0 } else { 0.0 };
                let x2 = u - 2.0 * b + (x1.floor().rem_euclid(2.0));
                data.push(2.0 * x1);
                data.push(2.0 * x2);
            }
        }
    }
    Tensor::new(vec![n, 2], data).expect("generator emits n*2 values")
}
