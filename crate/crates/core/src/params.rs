//! Named parameter storage, tape binding and the Adam optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};

/// Ordered collection of named dense tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    /// Panics on a missing name: parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Prefixes every name and merges into `self`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Params) {
        for (name, value) in other.iter() {
            self.insert(format!("{prefix}{name}"), value.clone());
        }
    }

    /// Sub-collection of names starting with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Params {
        let mut out = Params::new();
        for (name, value) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, value.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((value.nrows() as u64).to_le_bytes());
            hasher.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// In-place `self += scale * other` over shared names.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (name, value) in other.iter() {
            if let Some(t) = self.tensors.get_mut(name) {
                t.scaled_add(scale, value);
            } else {
                self.tensors.insert(name.clone(), value * scale);
            }
        }
    }
}

/// Lazily places parameters on a tape, one leaf per name.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    params: &'p Params,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p Params) -> Self {
        Self { tape, params, trainable: true, bound: RefCell::new(BTreeMap::new()) }
    }

    /// Binds parameters as constants; no gradient flows into them.
    pub fn frozen(tape: &'t Tape, params: &'p Params) -> Self {
        Self { tape, params, trainable: false, bound: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self.params.get(name).clone();
        let var = if self.trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    /// Gradients for every parameter touched during the forward pass.
    pub fn gradients(&self, grads: &Gradients) -> Params {
        let mut out = Params::new();
        for (name, var) in self.bound.borrow().iter() {
            out.insert(name.clone(), grads.get(*var));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Params,
    second: Params,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Params::new(), second: Params::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every parameter present in `grads`.
    pub fn step_with_lr(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Array2::zeros(g.dim()));
                self.second.insert(name.clone(), Array2::zeros(g.dim()));
            }
            let m = self.first.get_mut(name).expect("adam first moment");
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.second.get_mut(name).expect("adam second moment");
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let m = self.first.get(name);
            let v = self.second.get(name);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + epsilon);
            });
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, grads, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = Params::new();
        params.insert("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &params);
            let x = binder.get("x");
            let loss = x.add_scalar(-1.0).square().sum();
            let grads = binder.gradients(&tape.backward(loss));
            opt.step(&mut params, &grads);
        }
        let x = params.get("x");
        assert!((x[[0, 0]] - 1.0).abs() < 1e-2 && (x[[0, 1]] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut params = Params::new();
        params.insert("x", array![[0.0]]);
        let mut grads = Params::new();
        grads.insert("x", array![[123.0]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        opt.step(&mut params, &grads);
        assert!((params.get("x")[[0, 0]] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn digest_changes_with_values() {
        let mut a = Params::new();
        a.insert("w", array![[1.0, 2.0]]);
        let before = a.digest();
        a.get_mut("w").unwrap()[[0, 1]] = 2.5;
        assert_ne!(before, a.digest());
    }
}
