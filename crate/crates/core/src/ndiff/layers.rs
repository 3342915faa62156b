use super::store::{Init, ParamSlice, ParamStore};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `e^y - 1` for `y` in `[0, 40]`, branch-free so that loops over it
/// vectorize. Range reduction `y = n ln 2 + r` with `|r| <= ln 2 / 2`, then a
/// degree-13 Taylor polynomial for `expm1(r)`.
#[inline(always)]
fn expm1_nonneg(y: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let shifted = y * std::f64::consts::LOG2_E + SHIFT;
    let n = shifted - SHIFT;
    let r = (y - n * LN2_HI) - n * LN2_LO;
    let k = shifted.to_bits().wrapping_sub(SHIFT.to_bits());
    let scale = f64::from_bits(k.wrapping_add(1023) << 52);
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    let em1_r = r + r * r * p;
    scale * em1_r + (scale - 1.0)
}

/// Hyperbolic tangent with near-rounding relative accuracy, written without
/// branches or library calls so that elementwise loops vectorize.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    let ax = if ax > 20.0 { 20.0 } else { ax };
    let e = expm1_nonneg(2.0 * ax);
    (e / (e + 2.0)).copysign(x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn tanh_forward(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = tanh(*v);
    }
}

/// `x_bar = out_bar * (1 - out^2)`, given the forward output.
pub fn tanh_backward(out: &[f64], out_bar: &[f64], x_bar: &mut [f64]) {
    for ((xb, ob), o) in x_bar.iter_mut().zip(out_bar).zip(out) {
        *xb = ob * (1.0 - o * o);
    }
}

/// Dense affine map `y = W x + b`, `W: [out x in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamSlice,
    pub b: ParamSlice,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            &[out_dim, in_dim],
            Init::Glorot {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        );
        let b = store.add(format!("{prefix}.b"), &[out_dim], Init::Zeros);
        Self {
            w: store.slice(w),
            b: store.slice(b),
            in_dim,
            out_dim,
        }
    }
}

pub fn linear_forward(layer: &Linear, params: &[f64], x: &[f64], out: &mut [f64]) {
    let w = layer.w.of(params);
    let b = layer.b.of(params);
    for o in 0..layer.out_dim {
        out[o] = b[o] + dot(&w[o * layer.in_dim..(o + 1) * layer.in_dim], x);
    }
}

/// Accumulates parameter gradients into `grads`; overwrites `x_bar`.
pub fn linear_backward(
    layer: &Linear,
    params: &[f64],
    grads: &mut [f64],
    x: &[f64],
    out_bar: &[f64],
    x_bar: &mut [f64],
) {
    let n = layer.in_dim;
    x_bar.iter_mut().for_each(|v| *v = 0.0);
    let w = layer.w.of(params);
    for o in 0..layer.out_dim {
        axpy(out_bar[o], &w[o * n..(o + 1) * n], x_bar);
    }
    let gw = layer.w.of_mut(grads);
    for o in 0..layer.out_dim {
        axpy(out_bar[o], x, &mut gw[o * n..(o + 1) * n]);
    }
    let gb = layer.b.of_mut(grads);
    axpy(1.0, out_bar, gb);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Per-sample constants of a [`ConcatSquash`] layer: the context parts of the
/// gate pre-activation (`Wg[:,1:] w + bg`) and of the hyper-bias (`Wb[:,1:] w`).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTerms {
    pub gate_base: Vec<f64>,
    pub bias_base: Vec<f64>,
}

/// Context-conditioned layer
/// `out = (W h + b) ⊙ sigmoid(Wg [t, w] + bg) + Wb [t, w]`.
///
/// Shapes: `W: [out x in]`, `b, bg: [out]`, `Wg, Wb: [out x (1 + C)]`, where the
/// first column of `Wg` and `Wb` multiplies the time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcatSquash {
    pub w: ParamSlice,
    pub b: ParamSlice,
    pub wg: ParamSlice,
    pub bg: ParamSlice,
    pub wb: ParamSlice,
    pub in_dim: usize,
    pub out_dim: usize,
    pub ctx_dim: usize,
}

impl ConcatSquash {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        ctx_dim: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            &[out_dim, in_dim],
            Init::Glorot {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        );
        let b = store.add(format!("{prefix}.b"), &[out_dim], Init::Zeros);
        let hyper = Init::Glorot {
            fan_in: 1 + ctx_dim,
            fan_out: out_dim,
        };
        let wg = store.add(format!("{prefix}.wg"), &[out_dim, 1 + ctx_dim], hyper);
        let bg = store.add(format!("{prefix}.bg"), &[out_dim], Init::Zeros);
        let wb = store.add(format!("{prefix}.wb"), &[out_dim, 1 + ctx_dim], hyper);
        Self {
            w: store.slice(w),
            b: store.slice(b),
            wg: store.slice(wg),
            bg: store.slice(bg),
            wb: store.slice(wb),
            in_dim,
            out_dim,
            ctx_dim,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len + self.b.len + self.wg.len + self.bg.len + self.wb.len
    }

    pub fn context_terms(&self, params: &[f64], ctx: &[f64]) -> ContextTerms {
        let mut terms = ContextTerms {
            gate_base: vec![0.0; self.out_dim],
            bias_base: vec![0.0; self.out_dim],
        };
        self.context_terms_into(params, ctx, &mut terms.gate_base, &mut terms.bias_base);
        terms
    }

    pub fn context_terms_into(
        &self,
        params: &[f64],
        ctx: &[f64],
        gate_base: &mut [f64],
        bias_base: &mut [f64],
    ) {
        let k = 1 + self.ctx_dim;
        let wg = self.wg.of(params);
        let bg = self.bg.of(params);
        let wb = self.wb.of(params);
        for o in 0..self.out_dim {
            gate_base[o] = bg[o] + dot(&wg[o * k + 1..(o + 1) * k], ctx);
            bias_base[o] = dot(&wb[o * k + 1..(o + 1) * k], ctx);
        }
    }

    /// Plain single-sample forward (no activation).
    pub fn forward(&self, params: &[f64], h: &[f64], t: f64, ctx: &[f64], out: &mut [f64]) {
        let terms = self.context_terms(params, ctx);
        let n = self.out_dim;
        let (mut gate, mut pre) = (vec![0.0; n], vec![0.0; n]);
        self.gates_into(params, &terms.gate_base, t, &mut gate);
        self.forward_dual(
            params,
            h,
            &[],
            0,
            t,
            &gate,
            &terms.bias_base,
            Activation::Identity,
            &mut pre,
            out,
            &mut [],
            &mut [],
        );
    }

    /// Plain single-sample backward. Accumulates parameter gradients and
    /// `ctx_bar`; overwrites `h_bar`; returns the gradient w.r.t. `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        h: &[f64],
        t: f64,
        ctx: &[f64],
        out_bar: &[f64],
        h_bar: &mut [f64],
        ctx_bar: &mut [f64],
    ) -> f64 {
        let terms = self.context_terms(params, ctx);
        let n = self.out_dim;
        let (mut gate, mut pre, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        self.gates_into(params, &terms.gate_base, t, &mut gate);
        self.forward_dual(
            params,
            h,
            &[],
            0,
            t,
            &gate,
            &terms.bias_base,
            Activation::Identity,
            &mut pre,
            &mut out,
            &mut [],
            &mut [],
        );
        let mut acc = vec![0.0; 4 * n];
        self.backward_dual(
            params,
            grads,
            h,
            &[],
            0,
            t,
            Activation::Identity,
            &gate,
            &pre,
            &out,
            &[],
            out_bar,
            &[],
            h_bar,
            None,
            &mut acc,
        );
        self.context_backward(params, grads, ctx, &acc, ctx_bar);
        let k = 1 + self.ctx_dim;
        let wg = self.wg.of(params);
        let wb = self.wb.of(params);
        (0..n)
            .map(|o| acc[o] * wg[o * k] + acc[2 * n + o] * wb[o * k])
            .sum()
    }

    /// Gate values `sigmoid(gate_base + Wg[:,0] t)` at time `t`.
    pub fn gates_into(&self, params: &[f64], gate_base: &[f64], t: f64, gate: &mut [f64]) {
        let k = 1 + self.ctx_dim;
        let wg = self.wg.of(params);
        for o in 0..self.out_dim {
            gate[o] = sigmoid(gate_base[o] + wg[o * k] * t);
        }
    }

    /// Forward pass with `nd` tangent directions and a fused activation.
    ///
    /// `gate` comes from [`ConcatSquash::gates_into`]. `hd` holds the input
    /// tangents (`nd x in`, row per direction). Writes the pre-gate affine output, the activated output, the pre-gate
    /// tangents `q = W hd` (`nd x out`) and the activated output tangents `outd`
    /// (`nd x out`).
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn forward_dual(
        &self,
        params: &[f64],
        h: &[f64],
        hd: &[f64],
        nd: usize,
        t: f64,
        gate: &[f64],
        bias_base: &[f64],
        act: Activation,
        pre: &mut [f64],
        out: &mut [f64],
        q: &mut [f64],
        outd: &mut [f64],
    ) {
        let (ni, no, k) = (self.in_dim, self.out_dim, 1 + self.ctx_dim);
        let w = self.w.of(params);
        let b = self.b.of(params);
        let wb = self.wb.of(params);
        for o in 0..no {
            let row = &w[o * ni..(o + 1) * ni];
            let p = b[o] + dot(row, h);
            let g = gate[o];
            let y = p * g + bias_base[o] + wb[o * k] * t;
            let a = match act {
                Activation::Tanh => tanh(y),
                Activation::Identity => y,
            };
            pre[o] = p;
            out[o] = a;
            let d = match act {
                Activation::Tanh => (1.0 - a * a) * g,
                Activation::Identity => g,
            };
            for i in 0..nd {
                let qi = dot(row, &hd[i * ni..(i + 1) * ni]);
                q[i * no + o] = qi;
                outd[i * no + o] = d * qi;
            }
        }
    }

    /// Reverse pass of [`ConcatSquash::forward_dual`].
    ///
    /// Given adjoints of the activated output (`out_bar`) and of its tangents
    /// (`outd_bar`, may be empty when `nd == 0`), accumulates parameter
    /// gradients for `W` and `b` into `grads`, overwrites `h_bar` and, when
    /// given, `hd_bar`. Gate/hyper-bias adjoints are summed into `acc`
    /// (`[Σ u_bar, Σ t u_bar, Σ v_bar, Σ t v_bar]`, each `out` long) and turned
    /// into context-path gradients later by [`ConcatSquash::context_backward`].
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn backward_dual(
        &self,
        params: &[f64],
        grads: &mut [f64],
        h: &[f64],
        hd: &[f64],
        nd: usize,
        t: f64,
        act: Activation,
        gate: &[f64],
        pre: &[f64],
        out: &[f64],
        q: &[f64],
        out_bar: &[f64],
        outd_bar: &[f64],
        h_bar: &mut [f64],
        mut hd_bar: Option<&mut [f64]>,
        acc: &mut [f64],
    ) {
        let (ni, no) = (self.in_dim, self.out_dim);
        h_bar.iter_mut().for_each(|v| *v = 0.0);
        if let Some(hdb) = hd_bar.as_deref_mut() {
            hdb.iter_mut().for_each(|v| *v = 0.0);
        }
        let w_off = self.w.offset;
        let b_off = self.b.offset;
        for o in 0..no {
            let g = gate[o];
            let a = out[o];
            // adjoint of y (pre-activation) and of the pre-activation tangents
            let (mut y_bar, d) = match act {
                Activation::Tanh => (out_bar[o] * (1.0 - a * a), 1.0 - a * a),
                Activation::Identity => (out_bar[o], 1.0),
            };
            let mut g_bar = 0.0;
            for i in 0..nd {
                let qi = q[i * no + o];
                let ab = outd_bar[i * no + o];
                if let Activation::Tanh = act {
                    // ydot = q g, adot = (1 - a^2) ydot, d(1 - a^2)/dy = -2a(1 - a^2)
                    y_bar += ab * qi * g * (-2.0 * a * d);
                }
                g_bar += ab * d * qi;
            }
            // adjoint of the pre-gate tangent q_i is outd_bar_i * d * g
            let dg = d * g;
            g_bar += y_bar * pre[o];
            let u_bar = g_bar * g * (1.0 - g);
            let p_bar = y_bar * g;
            acc[o] += u_bar;
            acc[no + o] += t * u_bar;
            acc[2 * no + o] += y_bar;
            acc[3 * no + o] += t * y_bar;

            let row = w_off + o * ni;
            grads[b_off + o] += p_bar;
            {
                let gw = &mut grads[row..row + ni];
                axpy(p_bar, h, gw);
                for i in 0..nd {
                    axpy(outd_bar[i * no + o] * dg, &hd[i * ni..(i + 1) * ni], gw);
                }
            }
            let wrow = &params[row..row + ni];
            axpy(p_bar, wrow, h_bar);
            if let Some(hdb) = hd_bar.as_deref_mut() {
                for i in 0..nd {
                    axpy(
                        outd_bar[i * no + o] * dg,
                        wrow,
                        &mut hdb[i * ni..(i + 1) * ni],
                    );
                }
            }
        }
    }

    /// Turn accumulated gate/hyper-bias adjoints into gradients of `Wg`, `bg`,
    /// `Wb` and of the context vector (accumulated into `ctx_bar`).
    pub fn context_backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        ctx: &[f64],
        acc: &[f64],
        ctx_bar: &mut [f64],
    ) {
        let (no, k) = (self.out_dim, 1 + self.ctx_dim);
        let (su, tu, sv, tv) = (
            &acc[..no],
            &acc[no..2 * no],
            &acc[2 * no..3 * no],
            &acc[3 * no..4 * no],
        );
        {
            let gwg = self.wg.of_mut(grads);
            for o in 0..no {
                gwg[o * k] += tu[o];
                axpy(su[o], ctx, &mut gwg[o * k + 1..(o + 1) * k]);
            }
        }
        axpy(1.0, su, self.bg.of_mut(grads));
        {
            let gwb = self.wb.of_mut(grads);
            for o in 0..no {
                gwb[o * k] += tv[o];
                axpy(sv[o], ctx, &mut gwb[o * k + 1..(o + 1) * k]);
            }
        }
        let wg = self.wg.of(params);
        let wb = self.wb.of(params);
        for o in 0..no {
            axpy(su[o], &wg[o * k + 1..(o + 1) * k], ctx_bar);
            axpy(sv[o], &wb[o * k + 1..(o + 1) * k], ctx_bar);
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn tanh_matches_std() {
        let mut worst: f64 = 0.0;
        for i in -40000..=40000 {
            let x = i as f64 * 1e-3 + 1e-7;
            let (a, b) = (super::tanh(x), x.tanh());
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
        assert!(worst < 1e-15, "worst relative error {worst}");
        assert_eq!(super::tanh(0.0), 0.0);
        assert_eq!(super::tanh(1e-300), 1e-300);
        assert_eq!(super::tanh(-800.0), -1.0);
        assert!(super::tanh(f64::NAN).is_nan());
    }

    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_store(
        seed: u64,
        f: impl FnOnce(&mut ParamStore) -> ConcatSquash,
    ) -> (ParamStore, ConcatSquash) {
        let mut s = ParamStore::new(seed);
        let layer = f(&mut s);
        // move biases away from zero so every path is exercised
        let mut rng = seed::rng(seed + 1);
        for v in s.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        (s, layer)
    }

    #[test]
    fn tanh_basics() {
        let mut out = [0.0];
        tanh_forward(&[0.0], &mut out);
        assert_eq!(out[0], 0.0);
        let mut xb = [0.0];
        tanh_backward(&out, &[1.0], &mut xb);
        assert_eq!(xb[0], 1.0);
    }

    #[test]
    fn zero_gate_halves_affine_part() {
        let mut s = ParamStore::new(2);
        let l = ConcatSquash::new(&mut s, "l", 3, 2, 2);
        let wg = l.wg;
        wg.of_mut(s.values_mut()).iter_mut().for_each(|v| *v = 0.0);
        let p = s.values().to_vec();
        let (h, t, ctx) = ([0.3, -1.0, 2.0], 0.4, [0.5, -0.2]);
        let mut out = [0.0; 2];
        l.forward(&p, &h, t, &ctx, &mut out);
        let w = l.w.of(&p);
        let b = l.b.of(&p);
        let wb = l.wb.of(&p);
        for o in 0..2 {
            let affine = b[o] + (0..3).map(|i| w[o * 3 + i] * h[i]).sum::<f64>();
            let hyper = wb[o * 3] * t + wb[o * 3 + 1] * ctx[0] + wb[o * 3 + 2] * ctx[1];
            assert!((out[o] - (0.5 * affine + hyper)).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut s = ParamStore::new(4);
        let l = Linear::new(&mut s, "lin", 3, 2);
        let x = [0.7, -0.1, 0.4];
        let wts = [1.3, -0.6];
        let loss = |p: &[f64], x: &[f64]| {
            let mut out = [0.0; 2];
            linear_forward(&l, p, x, &mut out);
            out.iter().zip(&wts).map(|(a, b)| a.tanh() * b).sum::<f64>()
        };
        let p = s.values().to_vec();
        let mut out = [0.0; 2];
        linear_forward(&l, &p, &x, &mut out);
        let mut act = [0.0; 2];
        tanh_forward(&out, &mut act);
        let mut pre_bar = [0.0; 2];
        tanh_backward(&act, &wts, &mut pre_bar);
        let mut grads = vec![0.0; p.len()];
        let mut xb = [0.0; 3];
        linear_backward(&l, &p, &mut grads, &x, &pre_bar, &mut xb);
        let eps = 1e-5;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * eps);
            assert!(
                (fd - grads[i]).abs() < 1e-8,
                "param {i}: {fd} vs {}",
                grads[i]
            );
        }
        for i in 0..3 {
            let (mut a, mut b) = (x, x);
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * eps);
            assert!((fd - xb[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_squash_plain_gradients() {
        let (s, l) = random_store(9, |s| ConcatSquash::new(s, "cs", 3, 4, 2));
        let p = s.values().to_vec();
        let (h, t, ctx) = ([0.2, -0.5, 0.9], 0.35, [0.1, -0.7]);
        let wts = [0.5, -1.0, 2.0, 0.25];
        let loss = |p: &[f64], h: &[f64], t: f64, c: &[f64]| {
            let mut out = [0.0; 4];
            l.forward(p, h, t, c, &mut out);
            out.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grads = vec![0.0; p.len()];
        let mut hb = [0.0; 3];
        let mut cb = [0.0; 2];
        let tb = l.backward(&p, &mut grads, &h, t, &ctx, &wts, &mut hb, &mut cb);
        let eps = 1e-5;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss(&a, &h, t, &ctx) - loss(&b, &h, t, &ctx)) / (2.0 * eps);
            assert!(rel(fd, grads[i]) < 1e-6, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..3 {
            let (mut a, mut b) = (h, h);
            a[i] += eps;
            b[i] -= eps;
            assert!(
                rel(
                    (loss(&p, &a, t, &ctx) - loss(&p, &b, t, &ctx)) / (2.0 * eps),
                    hb[i]
                ) < 1e-6
            );
        }
        for i in 0..2 {
            let (mut a, mut b) = (ctx, ctx);
            a[i] += eps;
            b[i] -= eps;
            assert!(
                rel(
                    (loss(&p, &h, t, &a) - loss(&p, &h, t, &b)) / (2.0 * eps),
                    cb[i]
                ) < 1e-6
            );
        }
        let fd_t = (loss(&p, &h, t + eps, &ctx) - loss(&p, &h, t - eps, &ctx)) / (2.0 * eps);
        assert!(rel(fd_t, tb) < 1e-6);
    }

    /// Loss on a dual forward: value part weighted by `wv`, tangent part by `wd`.
    #[test]
    fn concat_squash_dual_gradients() {
        let (s, l) = random_store(21, |s| ConcatSquash::new(s, "cs", 3, 4, 2));
        let p = s.values().to_vec();
        let nd = 2;
        let h = [0.2, -0.5, 0.9];
        let hd = [0.3, 0.1, -0.4, -0.2, 0.6, 0.05];
        let (t, ctx) = (0.6, [0.4, -0.3]);
        let wv = [0.5, -1.0, 2.0, 0.25];
        let wd = [0.1, 0.7, -0.3, 0.2, -0.5, 0.4, 0.9, -0.8];
        for act in [Activation::Tanh, Activation::Identity] {
            let loss = |p: &[f64], h: &[f64], hd: &[f64], c: &[f64]| {
                let terms = l.context_terms(p, c);
                let (mut g, mut pre, mut out) = ([0.0; 4], [0.0; 4], [0.0; 4]);
                let (mut q, mut od) = ([0.0; 8], [0.0; 8]);
                l.gates_into(p, &terms.gate_base, t, &mut g);
                l.forward_dual(
                    p,
                    h,
                    hd,
                    nd,
                    t,
                    &g,
                    &terms.bias_base,
                    act,
                    &mut pre,
                    &mut out,
                    &mut q,
                    &mut od,
                );
                dot(&out, &wv) + dot(&od, &wd)
            };
            let terms = l.context_terms(&p, &ctx);
            let (mut g, mut pre, mut out) = ([0.0; 4], [0.0; 4], [0.0; 4]);
            let (mut q, mut od) = ([0.0; 8], [0.0; 8]);
            l.gates_into(&p, &terms.gate_base, t, &mut g);
            l.forward_dual(
                &p,
                &h,
                &hd,
                nd,
                t,
                &g,
                &terms.bias_base,
                act,
                &mut pre,
                &mut out,
                &mut q,
                &mut od,
            );
            let mut grads = vec![0.0; p.len()];
            let mut hb = [0.0; 3];
            let mut hdb = [0.0; 6];
            let mut acc = [0.0; 16];
            l.backward_dual(
                &p,
                &mut grads,
                &h,
                &hd,
                nd,
                t,
                act,
                &g,
                &pre,
                &out,
                &q,
                &wv,
                &wd,
                &mut hb,
                Some(&mut hdb),
                &mut acc,
            );
            let mut cb = [0.0; 2];
            l.context_backward(&p, &mut grads, &ctx, &acc, &mut cb);

            let eps = 1e-5;
            let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            for i in 0..p.len() {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[i] += eps;
                b[i] -= eps;
                let fd = (loss(&a, &h, &hd, &ctx) - loss(&b, &h, &hd, &ctx)) / (2.0 * eps);
                assert!(
                    rel(fd, grads[i]) < 1e-6,
                    "{act:?} param {i}: {fd} vs {}",
                    grads[i]
                );
            }
            for i in 0..3 {
                let (mut a, mut b) = (h, h);
                a[i] += eps;
                b[i] -= eps;
                assert!(
                    rel(
                        (loss(&p, &a, &hd, &ctx) - loss(&p, &b, &hd, &ctx)) / (2.0 * eps),
                        hb[i]
                    ) < 1e-6
                );
            }
            for i in 0..6 {
                let (mut a, mut b) = (hd, hd);
                a[i] += eps;
                b[i] -= eps;
                assert!(
                    rel(
                        (loss(&p, &h, &a, &ctx) - loss(&p, &h, &b, &ctx)) / (2.0 * eps),
                        hdb[i]
                    ) < 1e-6
                );
            }
            for i in 0..2 {
                let (mut a, mut b) = (ctx, ctx);
                a[i] += eps;
                b[i] -= eps;
                assert!(
                    rel(
                        (loss(&p, &h, &hd, &a) - loss(&p, &h, &hd, &b)) / (2.0 * eps),
                        cb[i]
                    ) < 1e-6
                );
            }
        }
    }
}
