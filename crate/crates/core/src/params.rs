//! Trainable parameter storage, per-tape binding, the Adam optimizer, and
//! the checkpoint file format.
//!
//! A [`ParamStore`] owns the persistent float64 arrays. For each training
//! example a fresh [`Tape`] is built and the store is bound onto it with
//! [`ParamStore::bind`]; after the backward pass the bound view routes
//! per-tensor gradients back into a named [`GradAccum`].
//!
//! Checkpoints are JSON: a map from parameter name to `{"shape": [...],
//! "data": [...]}` with float64 entries, keys sorted. Stable across versions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::tensor::{Gradients, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named persistent parameters. Iteration order is insertion order, which
/// keeps gradient reductions and optimizer updates deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

/// Weight initialization recipes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Uniform(f64),
    /// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    Xavier,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(ModelError::Contract(format!("duplicate parameter {name}")));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Uniform(s) => (0..numel).map(|_| rng.gen_range(-s..s)).collect(),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [r, c] => (*c, *r),
                    [n] => (*n, *n),
                    _ => (numel, numel),
                };
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-s..s)).collect()
            }
        };
        self.entries.insert(name.to_string(), Param { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(Param::numel).sum()
    }

    /// Register every parameter as a leaf tensor on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundParams<'t>> {
        let mut tensors = IndexMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let t = tape.tensor(p.shape.clone(), p.data.clone())?;
            tensors.insert(name.clone(), t);
        }
        Ok(BoundParams { tensors, _tape: std::marker::PhantomData })
    }

    /// In-place update used by the optimizer.
    pub fn apply_update(&mut self, name: &str, delta: &[f64]) {
        let p = self.entries.get_mut(name).expect("unknown parameter");
        for (w, d) in p.data.iter_mut().zip(delta.iter()) {
            *w += d;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&String, &Param> = self.entries.iter().collect();
        let json = serde_json::to_string(&map)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let map: BTreeMap<String, Param> = serde_json::from_str(&text)?;
        let mut entries = IndexMap::with_capacity(map.len());
        for (name, p) in map {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(ModelError::Contract(format!(
                    "checkpoint parameter {name} has shape/data mismatch"
                )));
            }
            entries.insert(name, p);
        }
        Ok(ParamStore { entries })
    }

    /// Byte-stable sorted-map view used by checkpoints.
    pub fn sorted_map(&self) -> BTreeMap<&String, &Param> {
        self.entries.iter().collect()
    }

    pub fn from_map(map: BTreeMap<String, Param>) -> Result<Self> {
        let mut entries = IndexMap::with_capacity(map.len());
        for (name, p) in map {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(ModelError::Contract(format!(
                    "checkpoint parameter {name} has shape/data mismatch"
                )));
            }
            entries.insert(name, p);
        }
        Ok(ParamStore { entries })
    }

    /// Copy values for parameters whose name starts with `prefix` from `other`.
    pub fn load_subset_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, p) in &other.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            match self.entries.get_mut(name) {
                Some(mine) if mine.shape == p.shape => {
                    mine.data = p.data.clone();
                    n += 1;
                }
                Some(_) => {
                    return Err(ModelError::Contract(format!("shape mismatch loading {name}")))
                }
                None => return Err(ModelError::Contract(format!("unknown parameter {name}"))),
            }
        }
        Ok(n)
    }
}

/// Per-tape view of the parameters.
pub struct BoundParams<'t> {
    tensors: IndexMap<String, Tensor>,
    _tape: std::marker::PhantomData<&'t Tape>,
}

impl BoundParams<'_> {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::Contract(format!("unbound parameter {name}")))
    }

    /// Replace the tensor bound under `name` (gradient-check plumbing).
    pub fn set(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    /// Route tape gradients into the named accumulator. Unreachable
    /// parameters contribute zero.
    pub fn accumulate(&self, grads: &Gradients, out: &mut GradAccum) {
        for (name, t) in &self.tensors {
            if let Some(g) = grads.get(t) {
                let acc = out
                    .by_name
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; t.len()]);
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
        }
    }
}

/// Gradient sums keyed by parameter name.
#[derive(Default, Clone)]
pub struct GradAccum {
    by_name: IndexMap<String, Vec<f64>>,
}

impl GradAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_name.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Merge another accumulator into this one (fixed order, deterministic).
    pub fn merge(&mut self, other: &GradAccum) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.by_name.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Adam with global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) {
        self.t += 1;
        let norm = grads.global_norm();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut delta = vec![0.0; n];
            for i in 0..n {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                delta[i] = -self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.apply_update(&name, &delta);
        }
    }
}
