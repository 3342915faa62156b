//! Conditional continuous normalizing flow.
//!
//! A [`CnfStack`] maps base draws `z ~ N(0, I)` to targets `y` by integrating
//! `dz/dt = g(z, t, w)` over `[0, 1]` once per block, blocks applied in order.
//! Densities follow from integrating the Jacobian trace alongside the state:
//!
//! ```text
//! log p(y | w) = log N(z0; 0, I) - Σ_blocks ∫ tr(∂g/∂z) dt
//! ```
//!
//! Integration uses fixed-step RK4, so training gradients are those of the
//! discretized objective, obtained by reverse-mode differentiation through the
//! recorded solver steps.

mod dynamics;

pub use dynamics::DynamicsNet;

use dynamics::{BackScratch, Dirs};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::ndiff::ParamStore;
use crate::seed;

pub const T0: f64 = 0.0;
pub const T1: f64 = 1.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TraceEstimator {
    /// One forward tangent per coordinate; exact up to rounding.
    #[default]
    Exact,
    /// Single Rademacher probe per evaluation, unbiased but noisy.
    Hutchinson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnfConfig {
    pub dim: usize,
    pub context_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_blocks: usize,
    #[serde(default = "default_train_steps")]
    pub train_steps: usize,
    #[serde(default = "default_eval_steps")]
    pub eval_steps: usize,
    #[serde(default)]
    pub trace: TraceEstimator,
    #[serde(default = "default_trace_limit")]
    pub exact_trace_limit: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_steps() -> usize {
    20
}
fn default_eval_steps() -> usize {
    50
}
fn default_trace_limit() -> usize {
    32
}

impl CnfConfig {
    pub fn new(dim: usize, context_dim: usize, hidden_dims: Vec<usize>, n_blocks: usize) -> Self {
        Self {
            dim,
            context_dim,
            hidden_dims,
            n_blocks,
            train_steps: default_train_steps(),
            eval_steps: default_eval_steps(),
            trace: TraceEstimator::Exact,
            exact_trace_limit: default_trace_limit(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid_arg!("flow dimension must be at least 1"));
        }
        if self.n_blocks == 0 {
            return Err(invalid_arg!("n_blocks must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(invalid_arg!("hidden layer widths must be positive"));
        }
        if self.train_steps == 0 || self.eval_steps == 0 {
            return Err(invalid_arg!("solver step counts must be at least 1"));
        }
        if self.trace == TraceEstimator::Exact && self.dim > self.exact_trace_limit {
            return Err(invalid_arg!(
                "exact trace requested for dimension {} above the limit {}; use the hutchinson estimator",
                self.dim,
                self.exact_trace_limit
            ));
        }
        Ok(())
    }
}

/// Stack of conditional CNF blocks with a standard-normal base distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CnfStack {
    config: CnfConfig,
    nets: Vec<DynamicsNet>,
    store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct SerializedStack {
    config: CnfConfig,
    parameters: serde_json::Value,
}

impl CnfStack {
    pub fn new(config: CnfConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed::derive_seed(config.seed, "flow", 0));
        let nets = (0..config.n_blocks)
            .map(|b| {
                DynamicsNet::new(
                    &mut store,
                    &format!("flow.block{b}"),
                    config.dim,
                    config.context_dim,
                    &config.hidden_dims,
                )
            })
            .collect();
        Ok(Self {
            config,
            nets,
            store,
        })
    }

    pub fn config(&self) -> &CnfConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[DynamicsNet] {
        &self.nets
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    pub fn n_params(&self) -> usize {
        self.store.len()
    }

    fn engine(&self) -> Engine<'_> {
        Engine {
            config: &self.config,
            nets: &self.nets,
        }
    }

    fn check_inputs(&self, y: &[f64], w: &[f64]) -> Result<()> {
        if y.len() != self.config.dim {
            return Err(invalid_arg!(
                "expected a {}-dimensional target, got {}",
                self.config.dim,
                y.len()
            ));
        }
        if w.len() != self.config.context_dim {
            return Err(invalid_arg!(
                "expected a {}-dimensional context, got {}",
                self.config.context_dim,
                w.len()
            ));
        }
        Ok(())
    }

    /// `y = f(z, w)`: blocks in order, each integrated from `t0` to `t1`.
    pub fn forward_transform(&self, z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.forward_transform_with(z, w, self.config.eval_steps)
    }

    pub fn forward_transform_with(&self, z: &[f64], w: &[f64], steps: usize) -> Result<Vec<f64>> {
        self.check_inputs(z, w)?;
        self.transform_one(z, w, steps, Direction::Forward)
    }

    /// `z = f^{-1}(y, w)`: blocks in reverse order, each integrated from `t1`
    /// back to `t0`.
    pub fn inverse_transform(&self, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.inverse_transform_with(y, w, self.config.eval_steps)
    }

    pub fn inverse_transform_with(&self, y: &[f64], w: &[f64], steps: usize) -> Result<Vec<f64>> {
        self.check_inputs(y, w)?;
        self.transform_one(y, w, steps, Direction::Reverse)
    }

    fn transform_one(
        &self,
        x: &[f64],
        w: &[f64],
        steps: usize,
        dir: Direction,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(invalid_arg!("solver step count must be at least 1"));
        }
        let eng = self.engine();
        let params = self.store.values();
        let mut ws = Workspace::new(&eng, 1, false);
        ws.tables.build(&eng, params, &[w], steps);
        ws.z[..x.len()].copy_from_slice(x);
        ws.logdet[0] = 0.0;
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..self.nets.len()).collect(),
            Direction::Reverse => (0..self.nets.len()).rev().collect(),
        };
        for b in order {
            eng.integrate_block(params, b, &mut ws, 1, steps, dir, false, None)?;
        }
        Ok(ws.z[..x.len()].to_vec())
    }

    /// Exact trace of block `block`'s dynamics Jacobian at `(z, t, w)`.
    pub fn exact_trace(&self, block: usize, z: &[f64], t: f64, w: &[f64]) -> Result<f64> {
        self.check_inputs(z, w)?;
        let net = self
            .nets
            .get(block)
            .ok_or_else(|| invalid_arg!("block index {block} out of range"))?;
        if self.config.dim > self.config.exact_trace_limit {
            return Err(invalid_arg!(
                "dimension {} exceeds the exact-trace limit {}",
                self.config.dim,
                self.config.exact_trace_limit
            ));
        }
        Ok(net.exact_trace(self.store.values(), z, t, w))
    }

    /// Evaluates block `block`'s dynamics `g(z, t, w)`.
    pub fn dynamics(&self, block: usize, z: &[f64], t: f64, w: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(z, w)?;
        let net = self
            .nets
            .get(block)
            .ok_or_else(|| invalid_arg!("block index {block} out of range"))?;
        let mut out = vec![0.0; self.config.dim];
        net.eval(self.store.values(), z, t, w, &mut out);
        Ok(out)
    }

    /// `log p(y | w)` with the evaluation solver.
    pub fn log_prob(&self, y: &[f64], w: &[f64]) -> Result<f64> {
        self.check_inputs(y, w)?;
        Ok(self.log_prob_batch(y, w, self.config.eval_steps)?[0])
    }

    /// `log p(y_i | w_i)` for row-major blocks of targets (`n x P`) and
    /// contexts (`n x C`). Each row's value does not depend on the other rows.
    pub fn log_prob_batch(&self, ys: &[f64], ws_ctx: &[f64], steps: usize) -> Result<Vec<f64>> {
        let (p, c) = (self.config.dim, self.config.context_dim);
        let n = self.batch_rows(ys, ws_ctx)?;
        if steps == 0 {
            return Err(invalid_arg!("solver step count must be at least 1"));
        }
        let eng = self.engine();
        let params = self.store.values();
        let mut ws = Workspace::new(&eng, EVAL_CHUNK.min(n.max(1)), true);
        let mut out = vec![0.0; n];
        let order = context_order(ws_ctx, c, n);
        for rows in order.chunks(EVAL_CHUNK) {
            let r = rows.len();
            let ctxs: Vec<&[f64]> = rows.iter().map(|&i| &ws_ctx[i * c..(i + 1) * c]).collect();
            ws.tables.build(&eng, params, &ctxs, steps);
            for (j, &i) in rows.iter().enumerate() {
                let y = &ys[i * p..(i + 1) * p];
                for d in 0..p {
                    ws.z[d * r + j] = y[d];
                }
                eng.fill_probe(&mut ws, r, j, y);
            }
            ws.logdet[..r].iter_mut().for_each(|v| *v = 0.0);
            for b in (0..self.nets.len()).rev() {
                eng.integrate_block(params, b, &mut ws, r, steps, Direction::Reverse, true, None)?;
            }
            for (j, &i) in rows.iter().enumerate() {
                out[i] = ws.base_log_density(p, r, j) + ws.logdet[j];
            }
        }
        Ok(out)
    }

    fn batch_rows(&self, ys: &[f64], ws_ctx: &[f64]) -> Result<usize> {
        let (p, c) = (self.config.dim, self.config.context_dim);
        if !ys.len().is_multiple_of(p) {
            return Err(invalid_arg!(
                "target buffer length {} is not a multiple of {p}",
                ys.len()
            ));
        }
        let n = ys.len() / p;
        if ws_ctx.len() != n * c {
            return Err(invalid_arg!(
                "expected {} context values for {n} rows, got {}",
                n * c,
                ws_ctx.len()
            ));
        }
        Ok(n)
    }

    /// Draws `n` samples `y = f(z, w)` with `z ~ N(0, I)`; row-major `n x P`.
    pub fn sample(&self, w: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(self.sample_inner(w, n, seed, false)?.0)
    }

    /// Like [`CnfStack::sample`] but also returns `log p(y | w)` of each
    /// sample, computed along the forward path.
    pub fn sample_with_log_prob(
        &self,
        w: &[f64],
        n: usize,
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.sample_inner(w, n, seed, true)
    }

    fn sample_inner(
        &self,
        w: &[f64],
        n: usize,
        seed: u64,
        with_log_prob: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.config.dim;
        if w.len() != self.config.context_dim {
            return Err(invalid_arg!(
                "expected a {}-dimensional context, got {}",
                self.config.context_dim,
                w.len()
            ));
        }
        let mut rng = seed::rng(seed);
        let draws: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
        let eng = self.engine();
        let params = self.store.values();
        let steps = self.config.eval_steps;
        let mut ws = Workspace::new(&eng, EVAL_CHUNK.min(n.max(1)), with_log_prob);
        ws.tables.build(&eng, params, &[w], steps);
        let mut ys = vec![0.0; n * p];
        let mut lps = vec![0.0; if with_log_prob { n } else { 0 }];
        for start in (0..n).step_by(EVAL_CHUNK) {
            let r = EVAL_CHUNK.min(n - start);
            ws.tables.single_context(r);
            let mut base = vec![0.0; r];
            for j in 0..r {
                let z = &draws[(start + j) * p..(start + j + 1) * p];
                for d in 0..p {
                    ws.z[d * r + j] = z[d];
                }
                base[j] = std_normal_log_density(z);
                if with_log_prob {
                    eng.fill_probe(&mut ws, r, j, z);
                }
            }
            ws.logdet[..r].iter_mut().for_each(|v| *v = 0.0);
            for b in 0..self.nets.len() {
                eng.integrate_block(
                    params,
                    b,
                    &mut ws,
                    r,
                    steps,
                    Direction::Forward,
                    with_log_prob,
                    None,
                )?;
            }
            for j in 0..r {
                for d in 0..p {
                    ys[(start + j) * p + d] = ws.z[d * r + j];
                }
                if with_log_prob {
                    lps[start + j] = base[j] - ws.logdet[j];
                }
            }
        }
        Ok((ys, lps))
    }

    /// Mean negative log likelihood of a batch under the training solver, with
    /// gradients accumulated into the parameter store (not zeroed first).
    ///
    /// When `context_grads` is given (`n x C`), the gradient of the mean loss
    /// with respect to each row's context is written there. A non-finite loss
    /// clears the parameter gradients and returns [`Error::Numerical`].
    pub fn nll_loss_and_gradients(
        &mut self,
        ys: &[f64],
        ws_ctx: &[f64],
        mut context_grads: Option<&mut [f64]>,
    ) -> Result<f64> {
        let (p, c) = (self.config.dim, self.config.context_dim);
        let n = self.batch_rows(ys, ws_ctx)?;
        if n == 0 {
            return Err(invalid_arg!("empty batch"));
        }
        if let Some(cg) = context_grads.as_deref_mut() {
            if cg.len() != n * c {
                return Err(invalid_arg!(
                    "context gradient buffer must hold {} values",
                    n * c
                ));
            }
            cg.iter_mut().for_each(|v| *v = 0.0);
        }
        let steps = self.config.train_steps;
        let weight = 1.0 / n as f64;
        let eng = Engine {
            config: &self.config,
            nets: &self.nets,
        };
        let (params, grads) = self.store.split_mut();
        let chunk = eng.train_chunk(steps).min(n);
        let mut ws = Workspace::new(&eng, chunk, true);
        ws.tape.resize(eng.tape_len(steps, ws.nd, chunk), 0.0);
        let order = context_order(ws_ctx, c, n);
        let mut total = 0.0;
        let mut ctx_rows = vec![0.0; chunk * c];
        let mut w_bar = vec![0.0; chunk * c];
        for rows in order.chunks(chunk) {
            let r = rows.len();
            let ctxs: Vec<&[f64]> = rows.iter().map(|&i| &ws_ctx[i * c..(i + 1) * c]).collect();
            for (j, w) in ctxs.iter().enumerate() {
                ctx_rows[j * c..(j + 1) * c].copy_from_slice(w);
            }
            ws.tables.build(&eng, params, &ctxs, steps);
            for (j, &i) in rows.iter().enumerate() {
                let y = &ys[i * p..(i + 1) * p];
                for d in 0..p {
                    ws.z[d * r + j] = y[d];
                }
                eng.fill_probe(&mut ws, r, j, y);
            }
            let loss = eng.chunk_loss_and_grad(
                params,
                grads,
                &mut ws,
                r,
                steps,
                weight,
                &ctx_rows[..r * c],
                &mut w_bar[..r * c],
            );
            let loss = match loss {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(_) => {
                    grads.iter_mut().for_each(|g| *g = 0.0);
                    return Err(Error::Numerical(format!(
                        "non-finite loss among batch rows {rows:?}; batch rejected"
                    )));
                }
            };
            total += loss;
            if let Some(cg) = context_grads.as_deref_mut() {
                for (j, &i) in rows.iter().enumerate() {
                    cg[i * c..(i + 1) * c].copy_from_slice(&w_bar[j * c..(j + 1) * c]);
                }
            }
        }
        Ok(total * weight)
    }

    pub fn to_json_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(SerializedStack {
            config: self.config.clone(),
            parameters: self.store.to_json_value()?,
        })?)
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let s: SerializedStack = serde_json::from_value(v.clone())?;
        let mut stack = Self::new(s.config)?;
        stack.store.load_json_value(&s.parameters)?;
        Ok(stack)
    }
}

/// `log N(z; 0, I)`.
pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - HALF_LN_2PI * z.len() as f64
}

/// Row order that groups identical contexts together (stable, bitwise).
fn context_order(ws_ctx: &[f64], c: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if c > 0 {
        let key = |i: usize| ws_ctx[i * c..(i + 1) * c].iter().map(|v| v.to_bits());
        order.sort_by(|&a, &b| key(a).cmp(key(b)));
    }
    order
}

/// Rows evaluated in lockstep for density evaluation and sampling.
const EVAL_CHUNK: usize = 64;
/// Upper bound on rows per training chunk.
const TRAIN_CHUNK: usize = 32;
/// Training tape budget in `f64` values per chunk.
const TAPE_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Reverse,
}

#[inline]
fn grid_time(k: usize, steps: usize) -> f64 {
    T0 + (T1 - T0) * k as f64 / (2 * steps) as f64
}

/// Per-context gate tables on the solver grid `t_k = t0 + k (t1 - t0) / 2n`,
/// shared by all rows of a chunk with the same context.
#[derive(Default)]
struct Tables {
    steps: usize,
    units: usize,
    n_blocks: usize,
    ctx_id: Vec<usize>,
    gates: Vec<f64>,
    bias: Vec<f64>,
    gate_base: Vec<f64>,
}

impl Tables {
    /// Builds tables for the given per-row contexts. Equal contexts must be
    /// adjacent to be shared.
    fn build(&mut self, eng: &Engine<'_>, params: &[f64], ctxs: &[&[f64]], steps: usize) {
        let u = eng.nets[0].units();
        let nb = eng.nets.len();
        let nt = 2 * steps + 1;
        self.steps = steps;
        self.units = u;
        self.n_blocks = nb;
        self.ctx_id.clear();
        let mut uniq: Vec<&[f64]> = Vec::new();
        for w in ctxs {
            let same = uniq.last().is_some_and(|prev| {
                prev.iter()
                    .zip(w.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            });
            if !same {
                uniq.push(w);
            }
            self.ctx_id.push(uniq.len() - 1);
        }
        self.gates.resize(uniq.len() * nb * nt * u, 0.0);
        self.bias.resize(uniq.len() * nb * u, 0.0);
        self.gate_base.resize(u, 0.0);
        for (ci, w) in uniq.iter().enumerate() {
            for (b, net) in eng.nets.iter().enumerate() {
                let boff = (ci * nb + b) * u;
                net.context_terms_into(
                    params,
                    w,
                    &mut self.gate_base,
                    &mut self.bias[boff..boff + u],
                );
                for k in 0..nt {
                    let off = ((ci * nb + b) * nt + k) * u;
                    net.gates_into(
                        params,
                        &self.gate_base,
                        grid_time(k, steps),
                        &mut self.gates[off..off + u],
                    );
                }
            }
        }
    }

    /// Points the first `r` rows at context 0.
    fn single_context(&mut self, r: usize) {
        self.ctx_id.clear();
        self.ctx_id.resize(r, 0);
    }

    fn gather_gates(&self, b: usize, k: usize, r: usize, out: &mut [f64]) {
        let (u, nt) = (self.units, 2 * self.steps + 1);
        for j in 0..r {
            let off = ((self.ctx_id[j] * self.n_blocks + b) * nt + k) * u;
            for (i, g) in self.gates[off..off + u].iter().enumerate() {
                out[i * r + j] = *g;
            }
        }
    }

    fn gather_bias(&self, b: usize, r: usize, out: &mut [f64]) {
        let u = self.units;
        for j in 0..r {
            let off = (self.ctx_id[j] * self.n_blocks + b) * u;
            for (i, v) in self.bias[off..off + u].iter().enumerate() {
                out[i * r + j] = *v;
            }
        }
    }
}

/// Buffers for one chunk of up to `cap` rows, all feature-major.
struct Workspace {
    cap: usize,
    nd: usize,
    explicit_dirs: bool,
    tables: Tables,
    gates: Vec<f64>,
    bias: Vec<f64>,
    z: Vec<f64>,
    zin: Vec<f64>,
    ks: Vec<f64>,
    tr: Vec<f64>,
    logdet: Vec<f64>,
    dirs: Vec<f64>,
    rec: Vec<f64>,
    tape: Vec<f64>,
    z_bar: Vec<f64>,
    k_bar: Vec<f64>,
    zin_bar: Vec<f64>,
    tau: Vec<f64>,
    acc: Vec<f64>,
    back: BackScratch,
}

impl Workspace {
    fn new(eng: &Engine<'_>, cap: usize, with_trace: bool) -> Self {
        let p = eng.config.dim;
        let u = eng.nets[0].units();
        let nd = if with_trace { eng.n_dirs() } else { 0 };
        let explicit_dirs = with_trace && eng.config.trace == TraceEstimator::Hutchinson;
        Self {
            cap,
            nd,
            explicit_dirs,
            tables: Tables::default(),
            gates: vec![0.0; u * cap],
            bias: vec![0.0; u * cap],
            z: vec![0.0; p * cap],
            zin: vec![0.0; p * cap],
            ks: vec![0.0; 4 * p * cap],
            tr: vec![0.0; 4 * cap],
            logdet: vec![0.0; cap],
            dirs: vec![0.0; if explicit_dirs { nd * p * cap } else { 0 }],
            rec: vec![0.0; eng.nets[0].record_len(nd, cap)],
            tape: Vec::new(),
            z_bar: vec![0.0; p * cap],
            k_bar: vec![0.0; 4 * p * cap],
            zin_bar: vec![0.0; p * cap],
            tau: vec![0.0; cap],
            acc: vec![0.0; 4 * u * cap],
            back: BackScratch::default(),
        }
    }

    fn base_log_density(&self, p: usize, r: usize, j: usize) -> f64 {
        let sq: f64 = (0..p).map(|d| self.z[d * r + j] * self.z[d * r + j]).sum();
        -0.5 * sq - HALF_LN_2PI * p as f64
    }
}

struct Engine<'a> {
    config: &'a CnfConfig,
    nets: &'a [DynamicsNet],
}

impl Engine<'_> {
    fn n_dirs(&self) -> usize {
        match self.config.trace {
            TraceEstimator::Exact => self.config.dim,
            TraceEstimator::Hutchinson => 1,
        }
    }

    /// Sets row `j`'s Hutchinson probe (a no-op for the exact trace). The probe
    /// is a deterministic function of the row key, so repeated evaluations of
    /// the same row agree.
    fn fill_probe(&self, ws: &mut Workspace, r: usize, j: usize, key: &[f64]) {
        if !ws.explicit_dirs {
            return;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in key {
            h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = seed::rng(seed::derive_seed(self.config.seed, "probe", h));
        for d in 0..self.config.dim {
            ws.dirs[d * r + j] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }

    fn eval_len(&self, nd: usize, r: usize) -> usize {
        self.nets[0].record_len(nd, r)
    }

    fn tape_len(&self, steps: usize, nd: usize, r: usize) -> usize {
        self.nets.len() * steps * 4 * self.eval_len(nd, r)
    }

    fn train_chunk(&self, steps: usize) -> usize {
        let per_row = self.tape_len(steps, self.n_dirs(), 1);
        (TAPE_BUDGET / per_row.max(1)).clamp(1, TRAIN_CHUNK)
    }

    /// One block of RK4 over `[t0, t1]` for the first `r` rows of `ws.z`.
    /// With `trace`, adds `∫ tr(∂g/∂z) dt` taken along the direction of
    /// integration into `ws.logdet`. With a tape, each evaluation's input
    /// state and intermediates are recorded for the reverse pass.
    #[allow(clippy::too_many_arguments)]
    fn integrate_block(
        &self,
        params: &[f64],
        b: usize,
        ws: &mut Workspace,
        r: usize,
        steps: usize,
        dir: Direction,
        trace: bool,
        mut tape: Option<&mut [f64]>,
    ) -> Result<()> {
        debug_assert!(r <= ws.cap);
        let p = self.config.dim;
        let pr = p * r;
        let net = &self.nets[b];
        let nd = if trace { ws.nd } else { 0 };
        let h = match dir {
            Direction::Forward => (T1 - T0) / steps as f64,
            Direction::Reverse => -(T1 - T0) / steps as f64,
        };
        let e_len = net.record_len(nd, r);
        ws.tables.gather_bias(b, r, &mut ws.bias);
        let coef = [0.0, 0.5 * h, 0.5 * h, h];
        for s in 0..steps {
            let (k0, k1, k2) = match dir {
                Direction::Forward => (2 * s, 2 * s + 1, 2 * s + 2),
                Direction::Reverse => (2 * (steps - s), 2 * (steps - s) - 1, 2 * (steps - s) - 2),
            };
            let ks_idx = [k0, k1, k1, k2];
            for j in 0..4 {
                if j != 2 {
                    ws.tables.gather_gates(b, ks_idx[j], r, &mut ws.gates);
                }
                if j == 0 {
                    ws.zin[..pr].copy_from_slice(&ws.z[..pr]);
                } else {
                    let (prev, _) = ws.ks.split_at((j) * pr);
                    let kprev = &prev[(j - 1) * pr..];
                    for i in 0..pr {
                        ws.zin[i] = ws.z[i] + coef[j] * kprev[i];
                    }
                }
                let dirs = match (nd, ws.explicit_dirs) {
                    (0, _) => Dirs::None,
                    (_, false) => Dirs::Identity,
                    (_, true) => Dirs::Explicit {
                        nd,
                        v: &ws.dirs[..nd * pr],
                    },
                };
                let t = grid_time(ks_idx[j], steps);
                let kj = &mut ws.ks[j * pr..(j + 1) * pr];
                let trj = &mut ws.tr[j * r..(j + 1) * r];
                let rec = match tape.as_deref_mut() {
                    Some(tp) => &mut tp[(s * 4 + j) * e_len..(s * 4 + j + 1) * e_len],
                    None => &mut ws.rec[..e_len],
                };
                net.forward_batch(
                    params,
                    r,
                    &ws.zin[..pr],
                    dirs,
                    t,
                    &ws.gates,
                    &ws.bias,
                    rec,
                    kj,
                    trj,
                );
            }
            for i in 0..pr {
                ws.z[i] += h / 6.0
                    * (ws.ks[i]
                        + 2.0 * ws.ks[pr + i]
                        + 2.0 * ws.ks[2 * pr + i]
                        + ws.ks[3 * pr + i]);
            }
            if nd > 0 {
                for j in 0..r {
                    ws.logdet[j] += h / 6.0
                        * (ws.tr[j]
                            + 2.0 * ws.tr[r + j]
                            + 2.0 * ws.tr[2 * r + j]
                            + ws.tr[3 * r + j]);
                }
            }
            if ws.z[..pr]
                .iter()
                .chain(&ws.logdet[..r])
                .any(|v| !v.is_finite())
            {
                return Err(Error::Numerical(format!(
                    "non-finite flow state in block {b} at solver step {s}"
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass through one recorded block (integrated in reverse time).
    /// `ws.z_bar` holds the adjoint of the block's final state on entry and of
    /// its initial state on exit; `l_bar` is the adjoint of every row's
    /// log-det accumulator.
    #[allow(clippy::too_many_arguments)]
    fn backward_block(
        &self,
        params: &[f64],
        grads: &mut [f64],
        b: usize,
        ws: &mut Workspace,
        r: usize,
        tape: &[f64],
        steps: usize,
        l_bar: f64,
    ) {
        let p = self.config.dim;
        let pr = p * r;
        let nd = ws.nd;
        let net = &self.nets[b];
        let h = -(T1 - T0) / steps as f64;
        let e_len = self.eval_len(nd, r);
        let w6 = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        let back_c = [0.0, 0.5 * h, 0.5 * h, h];
        for s in (0..steps).rev() {
            let k0 = 2 * (steps - s);
            let ks_idx = [k0, k0 - 1, k0 - 1, k0 - 2];
            for j in 0..4 {
                for i in 0..pr {
                    ws.k_bar[j * pr + i] = w6[j] * ws.z_bar[i];
                }
            }
            for j in (0..4).rev() {
                if j != 1 {
                    ws.tables.gather_gates(b, ks_idx[j], r, &mut ws.gates);
                }
                let rec = &tape[(s * 4 + j) * e_len..(s * 4 + j + 1) * e_len];
                ws.zin_bar[..pr].iter_mut().for_each(|v| *v = 0.0);
                ws.tau[..r].iter_mut().for_each(|v| *v = w6[j] * l_bar);
                let dirs = match ws.explicit_dirs {
                    false => Dirs::Identity,
                    true => Dirs::Explicit {
                        nd,
                        v: &ws.dirs[..nd * pr],
                    },
                };
                net.backward_batch(
                    params,
                    grads,
                    r,
                    dirs,
                    grid_time(ks_idx[j], steps),
                    &ws.gates,
                    rec,
                    &ws.k_bar[j * pr..(j + 1) * pr],
                    &ws.tau[..r],
                    &mut ws.zin_bar[..pr],
                    &mut ws.acc,
                    &mut ws.back,
                );
                for i in 0..pr {
                    ws.z_bar[i] += ws.zin_bar[i];
                }
                if j > 0 {
                    for i in 0..pr {
                        ws.k_bar[(j - 1) * pr + i] += back_c[j] * ws.zin_bar[i];
                    }
                }
            }
        }
    }

    /// Sum over the chunk of `-log p(y | w)` under the training solver, with
    /// `weight` times its gradients accumulated into `grads` and written (per
    /// row) into `w_bar`. Targets are preloaded into `ws.z`.
    #[allow(clippy::too_many_arguments)]
    fn chunk_loss_and_grad(
        &self,
        params: &[f64],
        grads: &mut [f64],
        ws: &mut Workspace,
        r: usize,
        steps: usize,
        weight: f64,
        ctx: &[f64],
        w_bar: &mut [f64],
    ) -> Result<f64> {
        let nb = self.nets.len();
        let p = self.config.dim;
        let block_len = steps * 4 * self.eval_len(ws.nd, r);
        let mut tape = std::mem::take(&mut ws.tape);
        ws.logdet[..r].iter_mut().for_each(|v| *v = 0.0);
        let mut result = Ok(());
        for (i, b) in (0..nb).rev().enumerate() {
            let seg = &mut tape[i * block_len..(i + 1) * block_len];
            if let Err(e) =
                self.integrate_block(params, b, ws, r, steps, Direction::Reverse, true, Some(seg))
            {
                result = Err(e);
                break;
            }
        }
        if let Err(e) = result {
            ws.tape = tape;
            return Err(e);
        }
        let loss: f64 = (0..r)
            .map(|j| -(ws.base_log_density(p, r, j) + ws.logdet[j]))
            .sum();
        if !loss.is_finite() {
            ws.tape = tape;
            return Ok(loss);
        }

        for i in 0..p * r {
            ws.z_bar[i] = weight * ws.z[i];
        }
        w_bar.iter_mut().for_each(|v| *v = 0.0);
        for (i, b) in (0..nb)
            .rev()
            .enumerate()
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
        {
            ws.acc.iter_mut().for_each(|v| *v = 0.0);
            self.backward_block(
                params,
                grads,
                b,
                ws,
                r,
                &tape[i * block_len..(i + 1) * block_len],
                steps,
                -weight,
            );
            self.nets[b].context_backward_batch(
                params,
                grads,
                r,
                ctx,
                &ws.acc[..4 * self.nets[b].units() * r],
                w_bar,
            );
        }
        ws.tape = tape;
        Ok(loss)
    }
}
