//! Named parameter sets, deterministic Kaiming initialization, and SGD with
//! momentum. Iteration order is always lexicographic by parameter path, so a
//! fixed seed reproduces bit-identical state.

use super::{Scalar, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::rng::Gaussian;
use std::collections::BTreeMap;

/// Map from dot-separated parameter path to tensor. `rng_seed` records the
/// seed the set was initialized from (provenance only; equality compares the
/// tensors).
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    pub rng_seed: u64,
}

impl<T: Scalar> PartialEq for ParamSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new(), rng_seed: 0 }
    }

    /// Insert a parameter; paths are unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter path {name:?}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    /// Lexicographic iteration (BTreeMap order).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn byte_size(&self) -> u64 {
        self.tensors.values().map(|t| t.byte_len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        out.rng_seed = self.rng_seed;
        for (name, t) in &self.tensors {
            out.tensors.insert(name.clone(), t.cast());
        }
        out
    }

    pub fn set_requires_grad(&mut self, value: bool) {
        for t in self.tensors.values_mut() {
            t.requires_grad = value;
        }
    }

    /// Copy `other` in under `prefix.` (used to assemble checkpoints).
    pub fn insert_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(&format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Extract the sub-set under `prefix.`, stripping the prefix.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        let full = format!("{prefix}.");
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&full) {
                out.tensors.insert(rest.to_string(), t.clone());
            }
        }
        out
    }

    /// Register every parameter on a tape. With `trainable` false the
    /// parameters are bound as constants regardless of their own flag.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> TapeBinding {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = if trainable && t.requires_grad { tape.leaf(t) } else { tape.constant(t) };
            ids.insert(name.clone(), id);
        }
        TapeBinding { ids }
    }

    /// Accumulate externally computed gradients into the stored tensors.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, g) in grads {
            let t = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name:?}")))?;
            if g.len() != t.numel() {
                return Err(Error::Dimension(format!(
                    "gradient length {} does not match parameter {name:?} ({} elements)",
                    g.len(),
                    t.numel()
                )));
            }
            match &mut t.grad {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => t.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Kaiming initialization: weights ~ Normal(0, sqrt(2 / fan_in)) from a
    /// single splitmix64 + Box–Muller stream walked in lexicographic order;
    /// biases (and other rank <= 1 parameters) are zero.
    pub fn kaiming_init(&mut self, seed: u64) {
        self.rng_seed = seed;
        let mut gauss = Gaussian::new(seed);
        for (name, t) in self.tensors.iter_mut() {
            let fan_in = if name.ends_with("bias") { None } else { kaiming_fan_in(t.shape()) };
            match fan_in {
                Some(fan) => {
                    let std = (2.0 / fan as f64).sqrt();
                    for v in t.data_mut() {
                        *v = T::from_f64(gauss.sample() * std);
                    }
                }
                None => {
                    for v in t.data_mut() {
                        *v = T::zero();
                    }
                }
            }
            t.requires_grad = true;
            t.grad = None;
        }
    }
}

/// Fan-in derived from a weight shape: conv `[Cout,Cin,Kh,Kw]` -> Cin*Kh*Kw,
/// depthwise `[C,Kh,Kw]` -> Kh*Kw, linear `[Dout,Din]` -> Din. Rank <= 1 has
/// no fan-in (zero-initialized).
pub fn kaiming_fan_in(shape: &[usize]) -> Option<usize> {
    match shape.len() {
        4 => Some(shape[1] * shape[2] * shape[3]),
        3 => Some(shape[1] * shape[2]),
        2 => Some(shape[1]),
        _ => None,
    }
}

/// Name -> node id map for one tape registration of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct TapeBinding {
    ids: BTreeMap<String, TensorId>,
}

impl TapeBinding {
    /// Assemble a binding from explicit (name, id) pairs. Used by oracles
    /// that register parameter tensors on a tape themselves.
    pub fn from_ids(ids: BTreeMap<String, TensorId>) -> Self {
        TapeBinding { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound on this tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.ids.iter()
    }

    /// Pull gradients off the tape, name by name. Parameters with no
    /// gradient flow come back as zeros.
    pub fn harvest_grads<T: Scalar>(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            let g = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tape.numel(id)],
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

/// SGD with classical momentum: `v <- momentum*v + grad; p <- p - lr*v`.
/// Velocities persist across steps; gradients are cleared by the step.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T: Scalar = f32> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        SgdMomentum { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().ok_or_else(|| {
                Error::Contract(format!("sgd step: parameter {name:?} has no gradient"))
            })?;
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
            let (lr, mom) = (self.lr, self.momentum);
            for (p, (v, g)) in t.data_mut().iter_mut().zip(vel.iter_mut().zip(&grad)) {
                *v = mom * *v + *g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
