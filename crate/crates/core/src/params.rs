//! Named parameter storage and its registration on a tape.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{config_err, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(config_err!("duplicate parameter name {name:?}"));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Kaiming-uniform weight: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Shape>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as Float).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: impl Into<Shape>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces every tensor with the same-named, same-shaped entry of `other`.
    pub fn load_from<'a>(&mut self, other: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in other {
            let id = self
                .position(name)
                .ok_or_else(|| config_err!("unexpected parameter {name:?}"))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(config_err!(
                    "parameter {name:?} has shape {}, expected {}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ));
            }
            self.tensors[id.0] = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(config_err!("missing parameter {:?}", self.names[i]));
        }
        Ok(())
    }

    /// Registers every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        )
    }
}

/// Maps each [`ParamId`] of a store to its leaf on one tape.
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Wraps leaves created elsewhere, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of all bound parameters after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Result<Vec<Tensor>> {
        self.0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .ok_or_else(|| config_err!("parameter leaf has no gradient; was backward run on a trainable binding?"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_respects_bound_and_names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.kaiming("w", [4, 6, 3, 3], 54, &mut rng).unwrap();
        let bound = (6.0f64 / 54.0).sqrt();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= bound));
        assert!(store.zeros("w", [1, 1, 1, 1]).is_err());
        assert_eq!(store.numel(), 216);
    }

    #[test]
    fn load_from_requires_exact_match() {
        let mut a = ParamStore::new();
        a.zeros("x", [1, 2, 1, 1]).unwrap();
        let mut b = ParamStore::new();
        b.add("x", Tensor::full([1, 2, 1, 1], 3.0)).unwrap();
        a.load_from(b.iter()).unwrap();
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        c.zeros("x", [1, 3, 1, 1]).unwrap();
        assert!(a.load_from(c.iter()).is_err());
        assert!(a.load_from(std::iter::empty()).is_err());
    }
}
