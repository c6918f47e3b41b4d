//! Named parameter storage and per-step tape binding.
//!
//! Parameters live outside any tape as plain `f64` buffers, keyed by
//! hierarchical names ("dec0.block.wdmoe.low1.qkv.w"). Each training step
//! binds them to a fresh tape as leaves; frozen names bind as constants so
//! no gradient is ever produced for them.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered map of named parameters. Iteration order (lexicographic by name)
/// is the canonical order for checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(numel(&shape), data.len(), "param {} shape/data mismatch", name);
        assert!(
            self.map.insert(name.to_string(), Param { shape, data }).is_none(),
            "duplicate param {}",
            name
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// Fan-in-scaled uniform init, U(-s, s) with s = 1/sqrt(fan_in).
    pub fn add_uniform(
        &mut self,
        rng: &mut ChaCha12Rng,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
    ) {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..numel(&shape)).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, shape, data);
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n = numel(&shape);
        self.insert(name, shape, vec![0.0; n]);
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n = numel(&shape);
        self.insert(name, shape, vec![value; n]);
    }

    /// Conv weight `[cout, cin_g, kh, kw]` plus zero bias `[cout]`.
    /// `zero_init` zeroes the weight as well (identity-start projections).
    pub fn add_conv(
        &mut self,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        cout: usize,
        cin_g: usize,
        kh: usize,
        kw: usize,
        zero_init: bool,
    ) {
        let shape = vec![cout, cin_g, kh, kw];
        if zero_init {
            self.add_zeros(&format!("{prefix}.w"), shape);
        } else {
            self.add_uniform(rng, &format!("{prefix}.w"), shape, cin_g * kh * kw);
        }
        self.add_zeros(&format!("{prefix}.b"), vec![cout]);
    }

    /// Linear weight `[din, dout]` plus zero bias `[dout]`.
    pub fn add_linear(
        &mut self,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        din: usize,
        dout: usize,
        zero_init: bool,
    ) {
        let shape = vec![din, dout];
        if zero_init {
            self.add_zeros(&format!("{prefix}.w"), shape);
        } else {
            self.add_uniform(rng, &format!("{prefix}.w"), shape, din);
        }
        self.add_zeros(&format!("{prefix}.b"), vec![dout]);
    }

    /// LayerNorm affine pair: gamma ones, beta zeros.
    pub fn add_norm(&mut self, prefix: &str, c: usize) {
        self.add_const(&format!("{prefix}.gamma"), vec![c], 1.0);
        self.add_zeros(&format!("{prefix}.beta"), vec![c]);
    }
}

/// Binds store parameters to a tape, remembering each bound leaf so
/// gradients can be collected by name after `backward`.
pub struct Binder<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    trainable: bool,
    frozen: Box<dyn Fn(&str) -> bool + 'a>,
    bound: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn train(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Binder { tape, store, trainable: true, frozen: Box::new(|_| false), bound: RefCell::default() }
    }

    pub fn train_frozen(
        tape: &'a Tape,
        store: &'a ParamStore,
        frozen: impl Fn(&str) -> bool + 'a,
    ) -> Self {
        Binder { tape, store, trainable: true, frozen: Box::new(frozen), bound: RefCell::default() }
    }

    /// All parameters bound as constants; no gradients recorded.
    pub fn inference(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Binder { tape, store, trainable: false, frozen: Box::new(|_| true), bound: RefCell::default() }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let t = if self.trainable && !(self.frozen)(name) {
            self.tape.leaf(p.data.clone(), p.shape.clone())?
        } else {
            Tensor::constant(p.data.clone(), p.shape.clone())?
        };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of all trainable bound parameters, after `tape.backward`.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, t) in self.bound.borrow().iter() {
            if let Some(g) = self.tape.grad(t) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binder_freezes_by_predicate() {
        let mut store = ParamStore::new();
        store.add_const("a.w", vec![2], 1.0);
        store.add_const("b.wdmoe.w", vec![2], 2.0);
        let tape = Tape::new();
        let b = Binder::train_frozen(&tape, &store, |n| n.contains(".wdmoe."));
        let ta = b.get("a.w").unwrap();
        let tb = b.get("b.wdmoe.w").unwrap();
        assert!(ta.node.is_some());
        assert!(tb.node.is_none());
        let y = tape.add(&ta, &tb).unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        let grads = b.grads();
        assert_eq!(grads.get("a.w").unwrap(), &vec![1.0, 1.0]);
        assert!(!grads.contains_key("b.wdmoe.w"));
    }

    #[test]
    fn binder_returns_same_leaf_for_repeated_get() {
        let mut store = ParamStore::new();
        store.add_const("x", vec![1], 3.0);
        let tape = Tape::new();
        let b = Binder::train(&tape, &store);
        let t1 = b.get("x").unwrap();
        let t2 = b.get("x").unwrap();
        assert_eq!(t1.node, t2.node);
    }

    #[test]
    fn deterministic_init_from_seed() {
        let mk = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha12Rng::seed_from_u64(42);
            store.add_conv(&mut rng, "c", 4, 2, 3, 3, false);
            store
        };
        assert_eq!(mk(), mk());
    }
}
