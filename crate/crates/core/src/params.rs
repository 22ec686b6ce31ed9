//! Named parameter storage with a trainable/frozen partition.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Additive accumulator; cleared by [`ParamStore::zero_grads`].
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// The leaf [`Var`] each parameter was given on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| &self.params[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
            p.grad = None;
        }
    }

    /// Puts every parameter on `tape` as a leaf. Trainable parameters require
    /// gradients only when `with_grad` is set.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Binding {
        self.bind_with(tape, with_grad, &[])
    }

    /// Like [`bind`](Self::bind) but uses existing vars for the listed parameters.
    pub fn bind_with(&self, tape: &mut Tape, with_grad: bool, overrides: &[(ParamId, Var)]) -> Binding {
        let vars = self
            .iter()
            .map(|(id, p)| match overrides.iter().find(|(o, _)| *o == id) {
                Some(&(_, v)) => v,
                None => tape.leaf(p.value.clone(), with_grad && p.trainable),
            })
            .collect();
        Binding { vars }
    }

    /// Adds this backward pass's gradients into each trainable parameter's accumulator.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(binding.vars[i]) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `(trainable, frozen)` scalar counts; together they cover every parameter.
    pub fn count(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.value.len(), f)
            } else {
                (t, f + p.value.len())
            }
        })
    }

    /// SHA-256 over name, shape and raw bits of every parameter accepted by `filter`.
    pub fn checksum(&self, filter: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn frozen_checksum(&self) -> String {
        self.checksum(|p| !p.trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulation_is_additive() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(&[1.0, -2.0]), true);
        let c = store.add("c", Tensor::vector(&[3.0, 4.0]), false);

        let run = |store: &mut ParamStore| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, true);
            let sq = tape.mul(b[w], b[w]).unwrap();
            let y = tape.mul(sq, b[c]).unwrap();
            let s = tape.sum(y);
            let g = tape.backward(s).unwrap();
            store.accumulate(&b, &g);
        };
        run(&mut store);
        let once = store.get(w).grad.clone().unwrap();
        run(&mut store);
        let twice = store.get(w).grad.clone().unwrap();
        assert_eq!(once.data(), &[6.0, -16.0]);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(store.get(c).grad.is_none());
        store.zero_grads();
        assert!(store.get(w).grad.is_none());
    }

    #[test]
    fn count_and_checksum() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[2, 3]), true);
        let b = store.add("b", Tensor::zeros(&[4]), false);
        assert_eq!(store.count(), (6, 4));
        let before = store.frozen_checksum();
        store.value_mut(b).data_mut()[0] = -0.0;
        assert_ne!(before, store.frozen_checksum(), "checksum is over raw bits");
    }
}
