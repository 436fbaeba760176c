//! Define-by-run reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive records its
//! inputs, output value, and enough structure to replay a vector-Jacobian
//! product in reverse. Cotangents are themselves emitted as tape nodes, so a
//! value produced by [`Tape::vjp`] stays differentiable — the log-determinant
//! terms built from J_g products can be trained through directly.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    /// Multiply by a compile-time-known constant (no gradient to the constant).
    Scale(Var, f64),
    AddConst(Var),
    /// Broadcast-multiply a rank-0 scalar into a tensor; both sides get gradients.
    ScalarMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Var, Var),
    Slice(Var, usize),
    Pad(Var, usize),
    RowSum(Var),
    BroadcastCols(Var),
    SumAll(Var),
    MeanAll(Var),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Matmul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ScalarMul(a, b)
            | Concat(a, b) => [Some(a), Some(b)],
            Neg(a) | Exp(a) | Log(a) | Sqrt(a) | Sigmoid(a) | Softplus(a) | Relu(a)
            | Scale(a, _) | AddConst(a) | Transpose(a) | Reshape(a) | Slice(a, _)
            | Pad(a, _) | RowSum(a) | BroadcastCols(a) | SumAll(a) | MeanAll(a) => {
                [Some(a), None]
            }
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input. No gradient is reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Register a parameter as a leaf; `backward` accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.param_vars.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).div(self.value(b))?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).neg();
        self.push(value, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).exp()?;
        Ok(self.push(value, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).ln()?;
        Ok(self.push(value, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sqrt()?;
        Ok(self.push(value, Op::Sqrt(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).softplus();
        self.push(value, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push(value, Op::Relu(a))
    }

    /// Multiply by a constant known outside the tape.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).add_const(c);
        self.push(value, Op::AddConst(a))
    }

    /// `s * x` where `s` is a rank-0 tape value; gradients flow to both.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).rank() != 0 {
            return Err(Error::BadShape {
                op: "scalar_mul",
                shape: self.value(s).shape().to_vec(),
                msg: "scale factor must be rank 0".into(),
            });
        }
        let sv = self.value(s).data()[0];
        let value = self.value(x).scale(sv);
        Ok(self.push(value, Op::ScalarMul(s, x)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Feature-dimension concatenation.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_features(self.value(b))?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Split along the feature dimension into `(first n1, rest)`.
    pub fn split_features(&mut self, a: Var, n1: usize) -> Result<(Var, Var)> {
        let total = self.value(a).last_dim()?;
        if n1 > total {
            return Err(Error::BadShape {
                op: "split_features",
                shape: self.value(a).shape().to_vec(),
                msg: format!("split point {n1} exceeds feature dim {total}"),
            });
        }
        let left = self.slice_features(a, 0, n1)?;
        let right = self.slice_features(a, n1, total - n1)?;
        Ok((left, right))
    }

    pub fn slice_features(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_features(start, len)?;
        Ok(self.push(value, Op::Slice(a, start)))
    }

    fn pad_features(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let value = self.value(a).pad_features(start, total)?;
        Ok(self.push(value, Op::Pad(a, start)))
    }

    /// Sum over the feature dimension of a matrix: `[r,c] -> [r]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_sum()?;
        Ok(self.push(value, Op::RowSum(a)))
    }

    fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let value = self.value(a).broadcast_cols(cols)?;
        Ok(self.push(value, Op::BroadcastCols(a)))
    }

    /// Full sum to a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_all();
        self.push(value, Op::SumAll(a))
    }

    /// Full mean to a rank-0 scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_all();
        self.push(value, Op::MeanAll(a))
    }

    /// Emit the cotangent contributions of node `id` given its cotangent `c`.
    fn emit_vjp(&mut self, id: usize, c: Var, cot: &mut [Option<Var>]) -> Result<()> {
        use Op::*;
        let op = self.nodes[id].op;
        match op {
            Leaf => {}
            Matmul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(c, bt)?;
                self.accumulate(cot, a, da)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, c)?;
                self.accumulate(cot, b, db)?;
            }
            Add(a, b) => {
                self.accumulate(cot, a, c)?;
                self.accumulate(cot, b, c)?;
            }
            Sub(a, b) => {
                self.accumulate(cot, a, c)?;
                let db = self.neg(c);
                self.accumulate(cot, b, db)?;
            }
            Mul(a, b) => {
                let da = self.mul(c, b)?;
                self.accumulate(cot, a, da)?;
                let db = self.mul(c, a)?;
                self.accumulate(cot, b, db)?;
            }
            Div(a, b) => {
                let da = self.div(c, b)?;
                self.accumulate(cot, a, da)?;
                let bb = self.mul(b, b)?;
                let q = self.div(a, bb)?;
                let m = self.mul(c, q)?;
                let db = self.neg(m);
                self.accumulate(cot, b, db)?;
            }
            Neg(a) => {
                let da = self.neg(c);
                self.accumulate(cot, a, da)?;
            }
            Exp(a) => {
                let y = Var(id);
                let da = self.mul(c, y)?;
                self.accumulate(cot, a, da)?;
            }
            Log(a) => {
                let da = self.div(c, a)?;
                self.accumulate(cot, a, da)?;
            }
            Sqrt(a) => {
                let y = Var(id);
                let q = self.div(c, y)?;
                let da = self.scale(q, 0.5);
                self.accumulate(cot, a, da)?;
            }
            Sigmoid(a) => {
                let y = Var(id);
                let ny = self.neg(y);
                let one_minus = self.add_const(ny, 1.0);
                let d = self.mul(y, one_minus)?;
                let da = self.mul(c, d)?;
                self.accumulate(cot, a, da)?;
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                let da = self.mul(c, s)?;
                self.accumulate(cot, a, da)?;
            }
            Relu(a) => {
                let mask = self.leaf(self.nodes[a.0].value.positive_mask());
                let da = self.mul(c, mask)?;
                self.accumulate(cot, a, da)?;
            }
            Scale(a, k) => {
                let da = self.scale(c, k);
                self.accumulate(cot, a, da)?;
            }
            AddConst(a) => {
                self.accumulate(cot, a, c)?;
            }
            ScalarMul(s, x) => {
                let prod = self.mul(c, x)?;
                let ds = self.sum(prod);
                self.accumulate(cot, s, ds)?;
                let dx = self.scalar_mul(s, c)?;
                self.accumulate(cot, x, dx)?;
            }
            Transpose(a) => {
                let da = self.transpose(c)?;
                self.accumulate(cot, a, da)?;
            }
            Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let da = self.reshape(c, &shape)?;
                self.accumulate(cot, a, da)?;
            }
            Concat(a, b) => {
                let n1 = self.nodes[a.0].value.last_dim()?;
                let n2 = self.nodes[b.0].value.last_dim()?;
                let da = self.slice_features(c, 0, n1)?;
                self.accumulate(cot, a, da)?;
                let db = self.slice_features(c, n1, n2)?;
                self.accumulate(cot, b, db)?;
            }
            Slice(a, start) => {
                let total = self.nodes[a.0].value.last_dim()?;
                let da = self.pad_features(c, start, total)?;
                self.accumulate(cot, a, da)?;
            }
            Pad(a, start) => {
                let len = self.nodes[a.0].value.last_dim()?;
                let da = self.slice_features(c, start, len)?;
                self.accumulate(cot, a, da)?;
            }
            RowSum(a) => {
                let cols = self.nodes[a.0].value.last_dim()?;
                let da = self.broadcast_cols(c, cols)?;
                self.accumulate(cot, a, da)?;
            }
            BroadcastCols(a) => {
                let da = self.row_sum(c)?;
                self.accumulate(cot, a, da)?;
            }
            SumAll(a) => {
                let ones = self.leaf(Tensor::ones(self.nodes[a.0].value.shape()));
                let da = self.scalar_mul(c, ones)?;
                self.accumulate(cot, a, da)?;
            }
            MeanAll(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let ones = self.leaf(Tensor::ones(self.nodes[a.0].value.shape()));
                let spread = self.scalar_mul(c, ones)?;
                let da = self.scale(spread, 1.0 / n);
                self.accumulate(cot, a, da)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, cot: &mut [Option<Var>], target: Var, contrib: Var) -> Result<()> {
        cot[target.0] = Some(match cot[target.0] {
            None => contrib,
            Some(existing) => self.add(existing, contrib)?,
        });
        Ok(())
    }

    /// Reverse accumulation from `root` seeded with `seed`. Returns the
    /// cotangent of each `wanted` node (zeros when `root` does not depend on
    /// it). The returned values are live tape nodes and remain differentiable.
    pub fn vjp(&mut self, root: Var, seed: Var, wanted: &[Var]) -> Result<Vec<Var>> {
        if self.value(root).shape() != self.value(seed).shape() {
            return Err(Error::ShapeMismatch {
                op: "vjp",
                lhs: self.value(root).shape().to_vec(),
                rhs: self.value(seed).shape().to_vec(),
            });
        }
        let n = root.0 + 1;
        let mut reach = vec![false; n];
        reach[root.0] = true;
        for id in (0..n).rev() {
            if reach[id] {
                for p in self.nodes[id].op.parents().into_iter().flatten() {
                    reach[p.0] = true;
                }
            }
        }
        let mut cot: Vec<Option<Var>> = vec![None; n];
        cot[root.0] = Some(seed);
        for id in (0..n).rev() {
            if !reach[id] {
                continue;
            }
            let Some(c) = cot[id] else { continue };
            self.emit_vjp(id, c, &mut cot)?;
        }
        wanted
            .iter()
            .map(|w| match cot.get(w.0).copied().flatten() {
                Some(c) => Ok(c),
                None => {
                    let z = Tensor::zeros(self.nodes[w.0].value.shape());
                    Ok(self.leaf(z))
                }
            })
            .collect()
    }

    /// Accumulate d(loss)/d(param) into every parameter registered on this tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let seed = self.leaf(Tensor::ones(self.value(loss).shape()));
        let wanted: Vec<Var> = self.param_vars.iter().map(|&(_, v)| v).collect();
        let ids: Vec<ParamId> = self.param_vars.iter().map(|&(id, _)| id).collect();
        let cots = self.vjp(loss, seed, &wanted)?;
        for (id, cot) in ids.into_iter().zip(cots) {
            let delta = self.value(cot).clone();
            store.accumulate_grad(id, &delta)?;
        }
        Ok(())
    }
}

/// One-shot vector-Jacobian product `v^T J_f(x)` for a tape-built function.
pub fn vjp_fn<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let seed = tape.leaf(v.clone());
    let out = tape.vjp(y, seed, &[xv])?[0];
    Ok(tape.value(out).clone())
}
