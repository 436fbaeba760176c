//! Named trainable parameters with gradient storage.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable value with an accumulated gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat ordered collection of parameters. Order is creation order and is the
/// canonical ordering for optimizers and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Reset every gradient to exactly zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Accumulate `delta` into the gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.grad.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        p.grad = p.grad.add(delta)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_matches_value_shape_and_zeroes() {
        let mut store = ParamStore::new();
        let id = store.create("w", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert_eq!(store.get(id).grad.shape(), &[2, 3]);
        store
            .accumulate_grad(id, &Tensor::ones(&[2, 3]))
            .unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0; 6]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data(), &[0.0; 6]);
    }

    #[test]
    fn lookup_by_name() {
        let mut store = ParamStore::new();
        store.create("a", Tensor::scalar(1.0));
        let b = store.create("b", Tensor::scalar(2.0));
        assert_eq!(store.id_by_name("b"), Some(b));
        assert!(store.by_name("missing").is_none());
    }
}
