//! Named parameter tensors with gradient buffers and optimizer state.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::graph::Gradients;
use super::matrix::Matrix;
use crate::error::{param_err, Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies a [`ParamStore`] inside a computation graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Matrix,
    grad: Matrix,
    // Adam first moment; unused by RMSProp.
    m1: Matrix,
    // Adam second moment or RMSProp mean-square accumulator.
    m2: Matrix,
}

/// A set of named parameters. Every parameter carries a same-shaped gradient
/// buffer and optimizer moments, all starting at zero.
///
/// Cloning yields an independent store with a new [`StoreId`], so gradients
/// recorded against the original are not applied to the clone.
#[derive(Debug)]
pub struct ParamStore {
    id: StoreId,
    entries: Vec<Entry>,
    adam_steps: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            entries: self.entries.clone(),
            adam_steps: self.adam_steps,
        }
    }
}

impl PartialEq for ParamStore {
    /// Compares names and values only.
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: StoreId::fresh(),
            entries: Vec::new(),
            adam_steps: 0,
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Adds a parameter and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return param_err(format!("duplicate parameter name {name}"));
        }
        value.ensure_finite(&name)?;
        let (r, c) = value.shape();
        self.entries.push(Entry {
            name,
            value,
            grad: Matrix::zeros(r, c),
            m1: Matrix::zeros(r, c),
            m2: Matrix::zeros(r, c),
        });
        Ok(self.entries.len() - 1)
    }

    /// Adds a parameter initialized uniformly in `[-scale, scale]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn value(&self, idx: usize) -> &Matrix {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.entries[idx].value
    }

    pub fn grad(&self, idx: usize) -> &Matrix {
        &self.entries[idx].grad
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => param_err(format!("unknown parameter {name}")),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Overwrites the gradient buffers with the gradients recorded for this
    /// store. Parameters the loss did not reach get zero.
    pub fn load_grads(&mut self, grads: &Gradients) {
        for (i, e) in self.entries.iter_mut().enumerate() {
            match grads.get(self.id, i) {
                Some(g) => e.grad.data_mut().copy_from_slice(g.data()),
                None => e.grad.data_mut().fill(0.0),
            }
        }
    }

    /// Sets a gradient buffer directly.
    pub fn set_grad(&mut self, idx: usize, grad: Matrix) -> Result<()> {
        if grad.shape() != self.entries[idx].value.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {:?}",
                grad.shape(),
                self.entries[idx].value.shape()
            )));
        }
        self.entries[idx].grad = grad;
        Ok(())
    }

    fn check_grads(&self) -> Result<()> {
        for e in &self.entries {
            if !e.grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is not finite; update rejected",
                    e.name
                )));
            }
        }
        Ok(())
    }

    /// One RMSProp step using the stored gradients. `ascent` moves along the
    /// gradient, otherwise against it.
    pub fn rmsprop_step(&mut self, lr: f64, ascent: bool, cfg: RmsPropConfig) -> Result<()> {
        if !(lr > 0.0) {
            return param_err(format!("learning rate must be positive, got {lr}"));
        }
        self.check_grads()?;
        let sign = if ascent { 1.0 } else { -1.0 };
        for e in &mut self.entries {
            let v = e.m2.data_mut();
            let p = e.value.data_mut();
            for ((pv, vv), &g) in p.iter_mut().zip(v.iter_mut()).zip(e.grad.data()) {
                *vv = cfg.decay * *vv + (1.0 - cfg.decay) * g * g;
                *pv += sign * lr * g / (vv.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam descent step using the stored gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        if !(lr > 0.0) {
            return param_err(format!("learning rate must be positive, got {lr}"));
        }
        self.check_grads()?;
        self.adam_steps += 1;
        let t = self.adam_steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let grad = e.grad.data();
            let m = e.m1.data_mut();
            let v = e.m2.data_mut();
            let p = e.value.data_mut();
            for i in 0..p.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Clamps every entry into `[-c, c]`.
    pub fn clip(&mut self, c: f64) -> Result<()> {
        if !(c > 0.0) {
            return param_err(format!("clip bound must be positive, got {c}"));
        }
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = v.clamp(-c, c);
            }
        }
        Ok(())
    }

    /// Resets optimizer moments and the Adam step counter.
    pub fn reset_optimizer(&mut self) {
        self.adam_steps = 0;
        for e in &mut self.entries {
            e.m1.data_mut().fill(0.0);
            e.m2.data_mut().fill(0.0);
        }
    }

    /// Max |entry| over all parameters.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.value.max_abs()))
    }

    /// Copies all values into one flat vector (entry order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Flat view of the gradient buffers, aligned with [`flatten`](Self::flatten).
    pub fn flatten_grads(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data().iter().copied())
            .collect()
    }

    /// Mutable access to a scalar by flat position.
    pub fn scalar_mut(&mut self, mut pos: usize) -> &mut f64 {
        for e in &mut self.entries {
            if pos < e.value.len() {
                return &mut e.value.data_mut()[pos];
            }
            pos -= e.value.len();
        }
        panic!("flat parameter position out of range");
    }
}
