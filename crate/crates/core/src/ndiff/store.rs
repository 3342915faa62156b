use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid_arg, Error, Result};
use crate::seed;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Location of a parameter inside the flat buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlice {
    pub offset: usize,
    pub len: usize,
}

impl ParamSlice {
    #[inline]
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Named parameter tensors stored back to back, with gradient accumulators and
/// Adam moments of the same layout.
///
/// Equality compares the named tensors and their values only; gradients,
/// optimizer moments and the initialization seed are training state.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    values: Vec<f64>,
    grads: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SerializedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.values == other.values
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            adam_t: 0,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a parameter. Initialization draws from a stream derived from
    /// the store seed and the registration index, so it is reproducible.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let id = self.entries.len();
        let len: usize = shape.iter().product();
        let offset = self.values.len();
        match init {
            Init::Zeros => self.values.resize(offset + len, 0.0),
            Init::Glorot { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = seed::rng(seed::derive_seed(self.seed, "param", id as u64));
                self.values.extend((0..len).map(|_| rng.gen_range(-a..a)));
            }
        }
        self.grads.resize(offset + len, 0.0);
        self.adam_m.resize(offset + len, 0.0);
        self.adam_v.resize(offset + len, 0.0);
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
        ParamId(id)
    }

    pub fn slice(&self, id: ParamId) -> ParamSlice {
        let e = &self.entries[id.0];
        ParamSlice {
            offset: e.offset,
            len: e.shape.iter().product(),
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        self.slice(id).of(&self.values)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = self.slice(id);
        s.of_mut(&mut self.values)
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.slice(id).of(&self.grads)
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        Tensor::from_vec(self.shape(id), self.value(id).to_vec())
            .expect("store shapes are consistent")
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Simultaneous read access to values and write access to gradients.
    pub fn split_mut(&mut self) -> (&[f64], &mut [f64]) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// One Adam update with bias correction; moments persist in the store.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grads[i];
            let m = cfg.beta1 * self.adam_m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            self.adam_m[i] = m;
            self.adam_v[i] = v;
            self.values[i] -= cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        }
    }

    /// Clears gradients and Adam moments, as if no step had been taken.
    pub fn reset_optimizer(&mut self) {
        self.zero_grad();
        self.adam_m.iter_mut().for_each(|m| *m = 0.0);
        self.adam_v.iter_mut().for_each(|v| *v = 0.0);
        self.adam_t = 0;
    }

    pub fn adam_steps_taken(&self) -> u64 {
        self.adam_t
    }

    /// Copy values in from another store with the same layout.
    pub fn load_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(invalid_arg!(
                "expected {} parameter values, got {}",
                self.values.len(),
                values.len()
            ));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// JSON-friendly dump: `[{name, shape, values}]`.
    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        let list: Vec<SerializedParam> = self
            .ids()
            .map(|id| SerializedParam {
                name: self.name(id).to_owned(),
                shape: self.shape(id).to_vec(),
                values: self.value(id).to_vec(),
            })
            .collect();
        Ok(serde_json::to_value(list)?)
    }

    /// Fill this store (already laid out) from [`ParamStore::to_json_value`]
    /// output. Names and shapes must match exactly.
    pub fn load_json_value(&mut self, v: &serde_json::Value) -> Result<()> {
        let list: Vec<SerializedParam> = serde_json::from_value(v.clone())?;
        if list.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                list.len()
            )));
        }
        for (id, p) in self.ids().collect::<Vec<_>>().into_iter().zip(list) {
            if p.name != self.name(id)
                || p.shape != self.shape(id)
                || p.values.len() != self.slice(id).len
            {
                return Err(Error::Format(format!(
                    "parameter '{}' does not match the expected layout",
                    p.name
                )));
            }
            self.value_mut(id).copy_from_slice(&p.values);
        }
        Ok(())
    }
}
