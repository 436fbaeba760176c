//! Signal-preservation analysis: sampled distance-ratio statistics of the
//! activation functions, the desk-scale measurement of gradient-norm
//! attenuation. Parameters are held at their initialization values since the
//! measurement precedes any training.

use crate::activations::ActivationSpec;
use crate::error::Result;
use crate::lipschitz::empirical_lipschitz;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;

/// Distance-ratio statistics of one activation at one dimension.
#[derive(Clone, Debug)]
pub struct RatioStats {
    pub activation: ActivationSpec,
    pub dim: usize,
    pub n_pairs: usize,
    /// Standard deviation of the sampling normal.
    pub scale: f64,
    pub mean: f64,
    pub max: f64,
}

/// Mean and max of `l2(phi(v), phi(w)) / l2(v, w)` over `n_pairs` pairs
/// `v, w ~ Normal(0, scale^2)^dim`.
pub fn ratio_stats(
    activation: ActivationSpec,
    dim: usize,
    n_pairs: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<RatioStats> {
    assert!(dim >= 1 && n_pairs >= 1);
    let f = |x: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = activation.apply_default(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    };
    let (mean, max) = empirical_lipschitz(f, dim, n_pairs, scale, rng)?;
    Ok(RatioStats {
        activation,
        dim,
        n_pairs,
        scale,
        mean,
        max,
    })
}

/// The default analysis grid: sigmoid, LipSwish, CLipSwish, identity.
pub fn default_activations() -> [ActivationSpec; 4] {
    [
        ActivationSpec::Sigmoid,
        ActivationSpec::LipSwish,
        ActivationSpec::CLipSwish,
        ActivationSpec::Identity,
    ]
}

/// The default dimension sweep.
pub const DEFAULT_DIMS: [usize; 3] = [1, 128, 1024];

/// Emit the full activation-by-dimension grid as CSV with header
/// `activation,dim,mean,max`.
pub fn table_report(
    dims: &[usize],
    activations: &[ActivationSpec],
    n_pairs: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<String> {
    let mut out = String::from("activation,dim,mean,max\n");
    for &act in activations {
        for &dim in dims {
            let stats = ratio_stats(act, dim, n_pairs, scale, rng)?;
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                act.name(),
                dim,
                stats.mean,
                stats.max
            ));
        }
    }
    Ok(out)
}
