//! Named parameter storage and per-step binding onto a [`Tape`].

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// All model parameters in registration order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which can only come
    /// from a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Number of scalar entries, optionally restricted to trainable ones.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrites values (and trainability) from another store with the same
    /// names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::State(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for p in &other.params {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::State(format!("unknown parameter {}", p.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::dim("load_from", dst.value.shape(), p.value.shape()));
            }
            dst.value = p.value.clone();
            dst.trainable = p.trainable;
        }
        Ok(())
    }
}

/// A tape plus lazily bound parameter leaves for one forward/backward pass.
///
/// Trainable parameters become `requires_grad` leaves; frozen ones become
/// constants.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = self.tape.leaf(param.value.clone(), param.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of the bound trainable parameters after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Matrix)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::filled(1, 2, 2.0), true);
        let b = store.add("b", Matrix::filled(2, 1, 3.0), false);
        let mut s = Session::new(&store);
        let (va, vb) = (s.p(a), s.p(b));
        assert_eq!(s.p(a), va);
        let y = s.tape.matmul(va, vb).unwrap();
        s.tape.backward(y).unwrap();
        let grads = s.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
        assert_eq!(grads[0].1.data(), &[3.0, 3.0]);
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut s1 = ParamStore::new();
        s1.add("w", Matrix::zeros(2, 2), true);
        let mut s2 = ParamStore::new();
        s2.add("w", Matrix::zeros(2, 3), true);
        assert!(s1.load_from(&s2).is_err());
    }
}
