//! Dense row-major `f64` tensors.
//!
//! The universal value carrier. Rank 0 (`shape == []`) is a scalar, rank 1 a
//! vector, rank 2 a matrix `[rows, cols]`. All numeric kernels used by the
//! tape live here so that non-taped code (power iteration, finite-difference
//! oracles) can share them.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Inputs to `exp` above this threshold would overflow f64.
const EXP_OVERFLOW: f64 = 709.0;

/// Dense row-major array of 64-bit reals with explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and data; the data length must equal the product of extents.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::BadShape {
                op: "Tensor::new",
                shape,
                msg: format!("data length {} != product of extents {}", data.len(), numel),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::BadShape {
                op: "scalar_value",
                shape: self.shape.clone(),
                msg: "expected exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::BadShape {
                op,
                shape: self.shape.clone(),
                msg: "expected a rank-2 tensor".into(),
            }),
        }
    }

    /// Number of trailing-dimension features (`cols` for matrices, length for vectors).
    pub fn last_dim(&self) -> Result<usize> {
        self.shape.last().copied().ok_or_else(|| Error::BadShape {
            op: "last_dim",
            shape: self.shape.clone(),
            msg: "scalar has no feature dimension".into(),
        })
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(rhs, op)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        if rhs.data.iter().any(|&b| b == 0.0) {
            return Err(Error::Numeric {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.zip_map(rhs, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v > EXP_OVERFLOW) {
            return Err(Error::Numeric {
                op: "exp",
                msg: format!("argument exceeds {EXP_OVERFLOW}; result would overflow"),
            });
        }
        Ok(self.map(f64::exp))
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric {
                op: "log",
                msg: "argument must be strictly positive".into(),
            });
        }
        Ok(self.map(f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric {
                op: "sqrt",
                msg: "argument must be non-negative".into(),
            });
        }
        Ok(self.map(f64::sqrt))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn softplus(&self) -> Tensor {
        self.map(softplus)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// 0/1 mask of strictly positive entries (the a.e. derivative of relu).
    pub fn positive_mask(&self) -> Tensor {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    /// Matrix product. `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Feature-dimension concatenation: rank-1 appends, rank-2 concatenates columns row-wise.
    pub fn concat_features(&self, rhs: &Tensor) -> Result<Tensor> {
        match (self.shape.as_slice(), rhs.shape.as_slice()) {
            ([a], [b]) => {
                let mut data = Vec::with_capacity(a + b);
                data.extend_from_slice(&self.data);
                data.extend_from_slice(&rhs.data);
                Ok(Tensor::vector(data))
            }
            ([r1, c1], [r2, c2]) if r1 == r2 => {
                let (r, c1, c2) = (*r1, *c1, *c2);
                let mut data = Vec::with_capacity(r * (c1 + c2));
                for i in 0..r {
                    data.extend_from_slice(&self.data[i * c1..(i + 1) * c1]);
                    data.extend_from_slice(&rhs.data[i * c2..(i + 1) * c2]);
                }
                Tensor::new(vec![r, c1 + c2], data)
            }
            _ => Err(Error::ShapeMismatch {
                op: "concat_features",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            }),
        }
    }

    /// Contiguous feature-dimension slice `[start, start+len)`.
    pub fn slice_features(&self, start: usize, len: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [n] => {
                if start + len > *n {
                    return Err(Error::BadShape {
                        op: "slice_features",
                        shape: self.shape.clone(),
                        msg: format!("slice {start}..{} out of bounds", start + len),
                    });
                }
                Ok(Tensor::vector(self.data[start..start + len].to_vec()))
            }
            [r, c] => {
                if start + len > *c {
                    return Err(Error::BadShape {
                        op: "slice_features",
                        shape: self.shape.clone(),
                        msg: format!("slice {start}..{} out of bounds", start + len),
                    });
                }
                let (r, c) = (*r, *c);
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
                }
                Tensor::new(vec![r, len], data)
            }
            _ => Err(Error::BadShape {
                op: "slice_features",
                shape: self.shape.clone(),
                msg: "expected rank 1 or 2".into(),
            }),
        }
    }

    /// Zero-pad along the feature dimension so the slice `[start, start+len)` holds `self`.
    pub fn pad_features(&self, start: usize, total: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [n] => {
                if start + n > total {
                    return Err(Error::BadShape {
                        op: "pad_features",
                        shape: self.shape.clone(),
                        msg: format!("slice {start}..{} exceeds total {total}", start + n),
                    });
                }
                let mut data = vec![0.0; total];
                data[start..start + n].copy_from_slice(&self.data);
                Ok(Tensor::vector(data))
            }
            [r, c] => {
                if start + c > total {
                    return Err(Error::BadShape {
                        op: "pad_features",
                        shape: self.shape.clone(),
                        msg: format!("slice {start}..{} exceeds total {total}", start + c),
                    });
                }
                let (r, c) = (*r, *c);
                let mut data = vec![0.0; r * total];
                for i in 0..r {
                    data[i * total + start..i * total + start + c]
                        .copy_from_slice(&self.data[i * c..(i + 1) * c]);
                }
                Tensor::new(vec![r, total], data)
            }
            _ => Err(Error::BadShape {
                op: "pad_features",
                shape: self.shape.clone(),
                msg: "expected rank 1 or 2".into(),
            }),
        }
    }

    /// Sum over the last dimension of a matrix: `[r,c] -> [r]`.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("row_sum")?;
        let data = (0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        Ok(Tensor::new(vec![r], data)?)
    }

    /// Replicate a vector into matrix columns: `[r] -> [r,c]`.
    pub fn broadcast_cols(&self, c: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [r] => {
                let mut data = Vec::with_capacity(r * c);
                for &v in &self.data {
                    data.extend(std::iter::repeat(v).take(c));
                }
                Tensor::new(vec![*r, c], data)
            }
            _ => Err(Error::BadShape {
                op: "broadcast_cols",
                shape: self.shape.clone(),
                msg: "expected rank 1".into(),
            }),
        }
    }

    /// Full sum to a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Full mean to a rank-0 scalar.
    pub fn mean_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        self.same_shape(rhs, "dot")?;
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("row")?;
        if i >= r {
            return Err(Error::BadShape {
                op: "row",
                shape: self.shape.clone(),
                msg: format!("row {i} out of bounds"),
            });
        }
        Ok(Tensor::vector(self.data[i * c..(i + 1) * c].to_vec()))
    }

    /// Stack rank-1 vectors of equal length into a matrix.
    pub fn from_rows(rows: &[Tensor]) -> Result<Tensor> {
        let c = match rows.first() {
            Some(t) => t.numel(),
            None => {
                return Err(Error::BadShape {
                    op: "from_rows",
                    shape: vec![],
                    msg: "no rows given".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows.len() * c);
        for t in rows {
            if t.numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), c],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows.len(), c], data)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus: the raw value whose softplus equals `y` (y > 0).
pub fn inverse_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}
