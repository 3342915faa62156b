use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::ndiff::{tanh, Init, ParamSlice, ParamStore};

/// Sparse input vector: `(index, value)` pairs with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseInput {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
    pub dim: usize,
}

impl SparseInput {
    /// A binary vector with ones at `active`.
    pub fn binary(active: Vec<u32>, dim: usize) -> Self {
        let val = vec![1.0; active.len()];
        Self {
            idx: active,
            val,
            dim,
        }
    }

    /// Keeps the nonzero entries of a dense vector.
    pub fn from_dense(dense: &[f64]) -> Self {
        let mut s = Self {
            dim: dense.len(),
            ..Self::default()
        };
        for (i, v) in dense.iter().enumerate() {
            if *v != 0.0 {
                s.idx.push(i as u32);
                s.val.push(*v);
            }
        }
        s
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for (i, v) in self.idx.iter().zip(&self.val) {
            d[*i as usize] = *v;
        }
        d
    }
}

/// One-layer compression of the occurrence vector: `w = tanh(W o + b)`.
///
/// `W` is stored dense (`[C x L]`) but only the columns of nonzero inputs are
/// touched in either direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowFeatureExtractor {
    in_dim: usize,
    out_dim: usize,
    w: ParamSlice,
    b: ParamSlice,
    store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct SerializedSfe {
    in_dim: usize,
    out_dim: usize,
    parameters: serde_json::Value,
}

impl ShallowFeatureExtractor {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 {
            return Err(invalid_arg!("context dimension must be at least 1"));
        }
        let mut store = ParamStore::new(seed);
        let w = store.add(
            "sfe.w",
            &[out_dim, in_dim],
            Init::Glorot {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        );
        let b = store.add("sfe.b", &[out_dim], Init::Zeros);
        let (w, b) = (store.slice(w), store.slice(b));
        Ok(Self {
            in_dim,
            out_dim,
            w,
            b,
            store,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, x: &SparseInput) -> Result<()> {
        if x.dim != self.in_dim || x.idx.iter().any(|&i| i as usize >= self.in_dim) {
            return Err(Error::SchemaMismatch(format!(
                "extractor expects {}-dimensional occurrence vectors, got {}",
                self.in_dim, x.dim
            )));
        }
        Ok(())
    }

    /// Writes `tanh(W x + b)` into `out` (length `C`).
    pub fn forward(&self, x: &SparseInput, out: &mut [f64]) -> Result<()> {
        self.check(x)?;
        let params = self.store.values();
        let (w, b) = (self.w.of(params), self.b.of(params));
        for (c, o) in out.iter_mut().enumerate().take(self.out_dim) {
            let row = &w[c * self.in_dim..(c + 1) * self.in_dim];
            let mut acc = b[c];
            for (i, v) in x.idx.iter().zip(&x.val) {
                acc += row[*i as usize] * v;
            }
            *o = tanh(acc);
        }
        Ok(())
    }

    /// Accumulates parameter gradients given the forward output `out` and
    /// its adjoint `out_bar`.
    pub fn backward(&mut self, x: &SparseInput, out: &[f64], out_bar: &[f64]) -> Result<()> {
        self.check(x)?;
        let (w_s, b_s, n_in) = (self.w, self.b, self.in_dim);
        let grads = self.store.grads_mut();
        for c in 0..self.out_dim {
            let pre_bar = out_bar[c] * (1.0 - out[c] * out[c]);
            b_s.of_mut(grads)[c] += pre_bar;
            let row = &mut w_s.of_mut(grads)[c * n_in..(c + 1) * n_in];
            for (i, v) in x.idx.iter().zip(&x.val) {
                row[*i as usize] += pre_bar * v;
            }
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(SerializedSfe {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            parameters: self.store.to_json_value()?,
        })?)
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let s: SerializedSfe = serde_json::from_value(v.clone())?;
        let mut sfe = Self::new(s.in_dim, s.out_dim, 0)?;
        sfe.store.load_json_value(&s.parameters)?;
        Ok(sfe)
    }
}
