//! Invertible dense-block flows.
//!
//! A block computes `F(x) = x + g(x)` where `g` stacks dense layers: each
//! layer concatenates a weighted copy of its input with a weighted nonlinear
//! transform, and a final spectrally normalized linear map projects back to
//! the data dimension. Keeping every layer at most 1-Lipschitz (and every
//! weight at most `coeff`-Lipschitz) makes `g` a contraction, so `F` is
//! invertible by fixed-point iteration.
//!
//! A parameter-matched residual baseline (plain weight/activation chain, no
//! concatenation) is provided for like-for-like comparisons.

use crate::activations::{Activation, ActivationSpec};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::spectral::SpectralWeight;
use crate::tape::{Tape, Var};
use crate::tensor::{inverse_softplus, softplus, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// How a dense layer weighs its two concatenated parts.
#[derive(Clone, Debug)]
pub enum ConcatMode {
    /// Divide the concatenation by sqrt(2).
    Fixed,
    /// Learnable weights on the unit circle: softplus-raw parameters
    /// normalized so the squared effective weights sum to one.
    Learnable { raw_eta1: ParamId, raw_eta2: ParamId },
}

/// Raw eta value whose softplus is 1; equal raws reproduce the fixed mode.
pub fn raw_eta_init() -> f64 {
    inverse_softplus(1.0)
}

/// One dense layer: `x -> [eta1 * x ; eta2 * phi(W x)]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: SpectralWeight,
    pub activation: Activation,
    pub concat: ConcatMode,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Effective unit-circle weights `(eta1_hat, eta2_hat)`; the fixed mode
    /// reports the sqrt(2)/2 pair.
    pub fn eta_hats(&self, store: &ParamStore) -> (f64, f64) {
        match &self.concat {
            ConcatMode::Fixed => (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
            ConcatMode::Learnable { raw_eta1, raw_eta2 } => {
                let s1 = softplus(store.value(*raw_eta1).data()[0]);
                let s2 = softplus(store.value(*raw_eta2).data()[0]);
                let n = (s1 * s1 + s2 * s2).sqrt();
                (s1 / n, s2 / n)
            }
        }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let got = tape.value(x).last_dim()?;
        if got != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "dense_layer_forward",
                lhs: vec![self.in_dim],
                rhs: tape.value(x).shape().to_vec(),
            });
        }
        let weff = self.weight.effective_on_tape(tape, store);
        let wt = tape.transpose(weff)?;
        let pre = tape.matmul(x, wt)?;
        let act = self.activation.apply(tape, store, pre)?;
        match &self.concat {
            ConcatMode::Fixed => {
                let cat = tape.concat_features(x, act)?;
                Ok(tape.scale(cat, std::f64::consts::FRAC_1_SQRT_2))
            }
            ConcatMode::Learnable { raw_eta1, raw_eta2 } => {
                let r1 = tape.param(store, *raw_eta1);
                let r2 = tape.param(store, *raw_eta2);
                let s1 = tape.softplus(r1);
                let s2 = tape.softplus(r2);
                let q1 = tape.mul(s1, s1)?;
                let q2 = tape.mul(s2, s2)?;
                let q = tape.add(q1, q2)?;
                let norm = tape.sqrt(q)?;
                let e1 = tape.div(s1, norm)?;
                let e2 = tape.div(s2, norm)?;
                let upper = tape.scalar_mul(e1, x)?;
                let lower = tape.scalar_mul(e2, act)?;
                tape.concat_features(upper, lower)
            }
        }
    }
}

/// Residual branch of one flow block: dense layers plus the projection back to d.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub proj: SpectralWeight,
    pub d: usize,
}

impl DenseBlock {
    pub fn g_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward_on_tape(tape, store, h)?;
        }
        let weff = self.proj.effective_on_tape(tape, store);
        let wt = tape.transpose(weff)?;
        tape.matmul(h, wt)
    }
}

/// Parameter-matched baseline branch: a plain chain of spectrally normalized
/// weights and activations without concatenation.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub weights: Vec<SpectralWeight>,
    pub activations: Vec<Activation>,
    pub d: usize,
}

impl ResidualBlock {
    pub fn g_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, w) in self.weights.iter().enumerate() {
            let weff = w.effective_on_tape(tape, store);
            let wt = tape.transpose(weff)?;
            h = tape.matmul(h, wt)?;
            if i + 1 < self.weights.len() {
                h = self.activations[i].apply(tape, store, h)?;
            }
        }
        Ok(h)
    }
}

/// One flow block of either architecture.
#[derive(Clone, Debug)]
pub enum Block {
    Dense(DenseBlock),
    Residual(ResidualBlock),
}

impl Block {
    pub fn g_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Block::Dense(b) => b.g_on_tape(tape, store, x),
            Block::Residual(b) => b.g_on_tape(tape, store, x),
        }
    }

    pub fn spectral_weights(&self) -> Vec<&SpectralWeight> {
        match self {
            Block::Dense(b) => {
                let mut v: Vec<&SpectralWeight> = b.layers.iter().map(|l| &l.weight).collect();
                v.push(&b.proj);
                v
            }
            Block::Residual(b) => b.weights.iter().collect(),
        }
    }

    fn spectral_weights_mut(&mut self) -> Vec<&mut SpectralWeight> {
        match self {
            Block::Dense(b) => {
                let mut v: Vec<&mut SpectralWeight> =
                    b.layers.iter_mut().map(|l| &mut l.weight).collect();
                v.push(&mut b.proj);
                v
            }
            Block::Residual(b) => b.weights.iter_mut().collect(),
        }
    }

    /// Number of Lipschitz factors in g (layers plus projection).
    pub fn lipschitz_factors(&self) -> usize {
        match self {
            Block::Dense(b) => b.layers.len() + 1,
            Block::Residual(b) => b.weights.len(),
        }
    }
}

/// Concatenation mode requested in a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatSpec {
    FixedSqrt2,
    Learnable,
}

impl ConcatSpec {
    pub fn name(self) -> &'static str {
        match self {
            ConcatSpec::FixedSqrt2 => "fixed",
            ConcatSpec::Learnable => "learnable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(ConcatSpec::FixedSqrt2),
            "learnable" => Ok(ConcatSpec::Learnable),
            other => Err(Error::InvalidConfig(format!("unknown concat mode '{other}'"))),
        }
    }
}

/// Architecture selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Dense,
    Residual,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Dense => "dense",
            ArchKind::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(ArchKind::Dense),
            "residual" => Ok(ArchKind::Residual),
            other => Err(Error::InvalidConfig(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub depth: usize,
    /// Features added by each dense layer's concatenation. Doubling
    /// activations use half this width before the activation so the
    /// post-activation budget matches.
    pub growth: usize,
    pub activation: ActivationSpec,
    pub concat: ConcatSpec,
    pub coeff: f64,
    pub arch: ArchKind,
}

impl Default for ModelConfig {
    /// Toy-scale default: 2-D data, 10 blocks of depth 3, CLipSwish with
    /// learnable concatenation, Lipschitz coefficient 0.98.
    fn default() -> Self {
        ModelConfig {
            d: 2,
            blocks: 10,
            depth: 3,
            growth: 32,
            activation: ActivationSpec::CLipSwish,
            concat: ConcatSpec::Learnable,
            coeff: 0.98,
            arch: ArchKind::Dense,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidConfig("data dimension must be positive".into()));
        }
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("need at least one block".into()));
        }
        if !(self.coeff > 0.0 && self.coeff <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "Lipschitz coefficient must lie in (0, 1], got {}",
                self.coeff
            )));
        }
        let factor = self.activation.width_factor();
        if self.depth > 0 {
            if self.growth == 0 {
                return Err(Error::InvalidConfig("growth must be positive".into()));
            }
            if self.growth % factor != 0 {
                return Err(Error::InvalidConfig(format!(
                    "growth {} must be divisible by the activation width factor {}",
                    self.growth, factor
                )));
            }
        }
        Ok(())
    }

    /// Rows of each dense-layer weight (pre-activation width).
    fn growth_rows(&self) -> usize {
        self.growth / self.activation.width_factor()
    }
}

/// Map between data space and latent space: an ordered stack of contraction
/// residual blocks over a standard-normal base density.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub params: ParamStore,
    pub blocks: Vec<Block>,
    pub config: ModelConfig,
}

/// Per-block tape handles cached by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    /// Block input.
    pub input: Var,
    /// Residual branch output g(x).
    pub g_out: Var,
    /// Block output x + g(x).
    pub output: Var,
}

impl FlowModel {
    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Record the whole stack on the tape; returns the latent output and the
    /// per-block trace used by log-determinant estimators and diagnostics.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<BlockTrace>)> {
        let mut h = x;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let trace = self.block_trace_on_tape_inner(tape, block, h)?;
            h = trace.output;
            traces.push(trace);
        }
        Ok((h, traces))
    }

    fn block_trace_on_tape_inner(
        &self,
        tape: &mut Tape,
        block: &Block,
        x: Var,
    ) -> Result<BlockTrace> {
        let g = block.g_on_tape(tape, &self.params, x)?;
        let out = tape.add(x, g)?;
        Ok(BlockTrace {
            input: x,
            g_out: g,
            output: out,
        })
    }

    /// Record a single block on the tape.
    pub fn block_trace_on_tape(&self, tape: &mut Tape, idx: usize, x: Var) -> Result<BlockTrace> {
        self.block_trace_on_tape_inner(tape, &self.blocks[idx], x)
    }

    /// Forward a `[rows, d]` batch with a scratch tape.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (z, _) = self.forward_on_tape(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Evaluate one block's residual branch on a `[rows, d]` batch.
    pub fn g_batch(&self, idx: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g = self.blocks[idx].g_on_tape(&mut tape, &self.params, xv)?;
        Ok(tape.value(g).clone())
    }

    /// One persistent-state power-iteration step on every weight; call once
    /// per training step before the forward pass.
    pub fn power_step_all(&mut self) -> Result<()> {
        let Self { params, blocks, .. } = self;
        for block in blocks.iter_mut() {
            for w in block.spectral_weights_mut() {
                for _ in 0..w.iters_per_step {
                    w.power_iteration_step(params)?;
                }
            }
        }
        Ok(())
    }

    /// Converge every spectral estimate (used before evaluation and
    /// certification; 50 iterations is the standard refresh).
    pub fn refresh_spectral(&mut self, iters: usize) -> Result<()> {
        let Self { params, blocks, .. } = self;
        for block in blocks.iter_mut() {
            for w in block.spectral_weights_mut() {
                for _ in 0..iters {
                    let (_, sigma) = w.power_iteration_step(params)?;
                    if sigma == 0.0 {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    /// Total number of scalar parameter entries.
    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// Mean effective concatenation weights over all dense layers, for logs.
    pub fn eta_means(&self) -> (f64, f64) {
        let mut n = 0usize;
        let (mut s1, mut s2) = (0.0, 0.0);
        for block in &self.blocks {
            if let Block::Dense(b) = block {
                for layer in &b.layers {
                    let (e1, e2) = layer.eta_hats(&self.params);
                    s1 += e1;
                    s2 += e2;
                    n += 1;
                }
            }
        }
        if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (s1 / n as f64, s2 / n as f64)
        }
    }

    /// Visit every spectral weight with its parameter name (block order).
    pub fn for_each_spectral(&self, mut f: impl FnMut(&str, &SpectralWeight)) {
        for block in &self.blocks {
            for w in block.spectral_weights() {
                f(&self.params.get(w.param).name, w);
            }
        }
    }

    /// Mutable visit of every spectral weight with its parameter name.
    pub fn for_each_spectral_mut(&mut self, mut f: impl FnMut(&str, &mut SpectralWeight)) {
        let Self { params, blocks, .. } = self;
        for block in blocks.iter_mut() {
            for w in block.spectral_weights_mut() {
                let name = params.get(w.param).name.clone();
                f(&name, w);
            }
        }
    }

    /// All dense-layer unit-circle weight pairs, block-major.
    pub fn eta_pairs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            if let Block::Dense(b) = block {
                for layer in &b.layers {
                    out.push(layer.eta_hats(&self.params));
                }
            }
        }
        out
    }
}

fn create_spectral_weight(
    store: &mut ParamStore,
    name: String,
    out_dim: usize,
    in_dim: usize,
    coeff: f64,
    rng: &mut impl Rng,
) -> SpectralWeight {
    // Variance 1/in keeps pre-activations order-one; the normalization pass
    // below caps the spectral norm at coeff before the first step.
    let std = (1.0 / in_dim as f64).sqrt();
    let id = store.create(name, Tensor::randn(&[out_dim, in_dim], std, rng));
    SpectralWeight::new(id, out_dim, coeff, rng)
}

fn build_dense_block(
    store: &mut ParamStore,
    config: &ModelConfig,
    k: usize,
    rng: &mut impl Rng,
) -> DenseBlock {
    let mut layers = Vec::with_capacity(config.depth);
    let mut in_dim = config.d;
    for i in 0..config.depth {
        let rows = config.growth_rows();
        let prefix = format!("block{k}.layer{i}");
        let weight =
            create_spectral_weight(store, format!("{prefix}.weight"), rows, in_dim, config.coeff, rng);
        let activation = Activation::bound(config.activation, store, &prefix);
        let concat = match config.concat {
            ConcatSpec::FixedSqrt2 => ConcatMode::Fixed,
            ConcatSpec::Learnable => ConcatMode::Learnable {
                raw_eta1: store.create(format!("{prefix}.eta1"), Tensor::scalar(raw_eta_init())),
                raw_eta2: store.create(format!("{prefix}.eta2"), Tensor::scalar(raw_eta_init())),
            },
        };
        let out_dim = in_dim + config.growth;
        layers.push(DenseLayer {
            weight,
            activation,
            concat,
            in_dim,
            out_dim,
        });
        in_dim = out_dim;
    }
    let proj = create_spectral_weight(
        store,
        format!("block{k}.proj.weight"),
        config.d,
        in_dim,
        config.coeff,
        rng,
    );
    DenseBlock {
        layers,
        proj,
        d: config.d,
    }
}

/// Scalar-parameter count of the dense architecture under `config`.
fn dense_scalar_count(config: &ModelConfig) -> usize {
    let mut count = 0usize;
    let mut in_dim = config.d;
    for _ in 0..config.depth {
        count += config.growth_rows() * in_dim; // weight
        count += activation_scalars(config.activation); // beta / alpha
        if config.concat == ConcatSpec::Learnable {
            count += 2; // etas
        }
        in_dim += config.growth;
    }
    count + config.d * in_dim // projection
}

fn activation_scalars(spec: ActivationSpec) -> usize {
    match spec {
        ActivationSpec::LipSwish | ActivationSpec::CLipSwish => 1,
        ActivationSpec::LeakyLSwish => 2,
        _ => 0,
    }
}

/// Scalar-parameter count of a residual chain with the given hidden widths.
fn residual_scalar_count(config: &ModelConfig, widths: &[usize]) -> usize {
    let factor = config.activation.width_factor();
    let mut count = 0usize;
    let mut in_dim = config.d;
    for &w in widths {
        count += w * in_dim + activation_scalars(config.activation);
        in_dim = w * factor;
    }
    count + config.d * in_dim
}

/// Hidden widths for the residual baseline matching the dense architecture's
/// parameter count as closely as integer widths allow.
fn matched_residual_widths(config: &ModelConfig) -> Vec<usize> {
    if config.depth == 0 {
        return Vec::new();
    }
    let target = dense_scalar_count(config) as i64;
    let f = config.activation.width_factor() as f64;
    let d = config.d as f64;
    let n = config.depth as f64;
    // Uniform-width estimate from the quadratic count: (n-1) f w^2 + d w (1 + f) = target.
    let a = (n - 1.0) * f;
    let b = d * (1.0 + f);
    let w0 = if a > 0.0 {
        ((-b + (b * b + 4.0 * a * target as f64).sqrt()) / (2.0 * a)).round() as i64
    } else {
        (target as f64 / b).round() as i64
    };
    let mut widths = vec![w0.max(1) as usize; config.depth];
    // Coordinate descent around the estimate.
    let gap = |ws: &[usize]| (residual_scalar_count(config, ws) as i64 - target).abs();
    let mut best = gap(&widths);
    loop {
        let mut improved = false;
        for i in 0..widths.len() {
            for delta in [-3i64, -2, -1, 1, 2, 3] {
                let cand = widths[i] as i64 + delta;
                if cand < 1 {
                    continue;
                }
                let mut ws = widths.clone();
                ws[i] = cand as usize;
                let g = gap(&ws);
                if g < best {
                    best = g;
                    widths = ws;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    widths
}

fn build_residual_block(
    store: &mut ParamStore,
    config: &ModelConfig,
    widths: &[usize],
    k: usize,
    rng: &mut impl Rng,
) -> ResidualBlock {
    let factor = config.activation.width_factor();
    let mut weights = Vec::with_capacity(widths.len() + 1);
    let mut activations = Vec::with_capacity(widths.len());
    let mut in_dim = config.d;
    for (i, &w) in widths.iter().enumerate() {
        let prefix = format!("block{k}.lin{i}");
        weights.push(create_spectral_weight(
            store,
            format!("{prefix}.weight"),
            w,
            in_dim,
            config.coeff,
            rng,
        ));
        activations.push(Activation::bound(config.activation, store, &prefix));
        in_dim = w * factor;
    }
    weights.push(create_spectral_weight(
        store,
        format!("block{k}.proj.weight"),
        config.d,
        in_dim,
        config.coeff,
        rng,
    ));
    ResidualBlock {
        weights,
        activations,
        d: config.d,
    }
}

/// Build an initialized model: weights drawn at variance 1/in, then one
/// normalization pass so every spectral norm starts at or below `coeff`;
/// concatenation weights start at effective value 1 (the sqrt(2)/2 pair).
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<FlowModel> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut blocks = Vec::with_capacity(config.blocks);
    match config.arch {
        ArchKind::Dense => {
            for k in 0..config.blocks {
                blocks.push(Block::Dense(build_dense_block(&mut store, config, k, &mut rng)));
            }
        }
        ArchKind::Residual => {
            let widths = matched_residual_widths(config);
            for k in 0..config.blocks {
                blocks.push(Block::Residual(build_residual_block(
                    &mut store, config, &widths, k, &mut rng,
                )));
            }
        }
    }
    let mut model = FlowModel {
        params: store,
        blocks,
        config: config.clone(),
    };
    let FlowModel { params, blocks, .. } = &mut model;
    for block in blocks.iter_mut() {
        for w in block.spectral_weights_mut() {
            w.normalize_raw(params)?;
        }
    }
    Ok(model)
}
