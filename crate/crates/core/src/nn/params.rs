use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, sc, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(id)
    }

    /// `N(0, std²)` entries.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let t = Tensor::from_fn(shape, || sc::<T>(std * rng.sample::<f64, _>(StandardNormal)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds every parameter gradient recorded on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (i, g) in tape.param_grads() {
            let slot = self.tensors[i].grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            slot.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
        }
    }

    /// Same names and shapes, elements converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor<T>)> = self.iter().collect();
        save_checkpoint(path, &entries)
    }

    /// Overwrites values from a checkpoint; names and shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = load_checkpoint::<T>(path)?;
        if loaded.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.len()
            )));
        }
        for (name, t) in loaded {
            let i = *self
                .lookup
                .get(&name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name} in checkpoint")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.with_grad();
        }
        Ok(())
    }
}

/// Binds parameters onto a tape, once per tape.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Parameters enter as differentiable leaves.
    pub fn train(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::make(tape, store, true)
    }

    /// Parameters enter as constants; nothing is differentiable.
    pub fn infer(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self::make(tape, store, false)
    }

    /// Uses caller-provided vars (one per parameter, in store order).
    pub fn prebound(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self {
            tape,
            store,
            bound: vars.iter().copied().map(Some).collect(),
            trainable: true,
        }
    }

    fn make(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.trainable {
            self.tape.param(t, id.0)
        } else {
            self.tape.constant(t.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::<f32>::new();
        a.add_normal("block0.self.Wq", &[4, 4], 0.5, &mut rng);
        a.add_zeros("block0.self.Wo", &[4, 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        a.save(&path).unwrap();

        let mut b = ParamStore::<f32>::new();
        b.add_zeros("block0.self.Wq", &[4, 4]);
        b.add_zeros("block0.self.Wo", &[4, 4]);
        b.load(&path).unwrap();
        assert_eq!(a.tensors()[0].data(), b.tensors()[0].data());

        let mut c = ParamStore::<f32>::new();
        c.add_zeros("block0.self.Wq", &[4, 2]);
        c.add_zeros("block0.self.Wo", &[4, 4]);
        assert!(c.load(&path).is_err());
    }

    #[test]
    fn params_bind_once_per_tape() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_ones("w", &[2]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::train(&mut tape, &store);
        let a = ctx.p(id);
        let b = ctx.p(id);
        assert_eq!(a, b);
        let s = ctx.tape.mul(a, b).unwrap();
        let s = ctx.tape.sum(s).unwrap();
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape);
        assert_eq!(store.get(id).grad.as_deref().unwrap(), &[2.0, 2.0]);
    }
}
