use crate::ndiff::{tanh, ConcatSquash, ParamStore};

/// Conditioned dynamics `g(z, t, w)`: a stack of concat-squash layers
/// `P -> hidden... -> P` with tanh between layers and a linear output.
///
/// Evaluation runs on chunks of `r` rows in lockstep. Chunk buffers are
/// feature-major: value `i` of row `j` sits at `i * r + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    layers: Vec<ConcatSquash>,
    dim: usize,
    ctx_dim: usize,
    unit_offsets: Vec<usize>,
    units: usize,
    max_width: usize,
}

/// Tangent directions pushed through the network alongside the values.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Dirs<'a> {
    None,
    /// The `P` coordinate axes, giving the exact Jacobian diagonal.
    Identity,
    /// `nd` directions per row, laid out `[nd][P][r]`.
    Explicit {
        nd: usize,
        v: &'a [f64],
    },
}

impl Dirs<'_> {
    pub(crate) fn count(&self, dim: usize) -> usize {
        match self {
            Dirs::None => 0,
            Dirs::Identity => dim,
            Dirs::Explicit { nd, .. } => *nd,
        }
    }
}

/// Reusable buffers for [`DynamicsNet::backward_batch`].
#[derive(Debug, Default)]
pub(crate) struct BackScratch {
    a_bar: Vec<f64>,
    h_bar: Vec<f64>,
    p_bar: Vec<f64>,
    wt: Vec<f64>,
    y_bar: Vec<f64>,
    gate_bar: Vec<f64>,
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[o][i] += Σ_c a[o][c] b[i][c]` for `a: [no][m]`, `b: [ni][m]`.
/// Lane sums are reduced in a fixed order, so results do not depend on the
/// blocking of `o` and `i`.
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], no: usize, ni: usize, m: usize) {
    const L: usize = 4;
    const OB: usize = 2;
    const IB: usize = 4;
    let mv = m / L * L;
    let reduce = |lanes: &[f64; L], a_row: &[f64], b_row: &[f64]| -> f64 {
        let tail: f64 = (mv..m).map(|c| a_row[c] * b_row[c]).sum();
        (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
    };
    let mut o0 = 0;
    while o0 < no {
        let ob = OB.min(no - o0);
        let mut i0 = 0;
        while i0 < ni {
            let ib = IB.min(ni - i0);
            if ob == OB && ib == IB {
                let mut acc = [[[0.0; L]; IB]; OB];
                for c0 in (0..mv).step_by(L) {
                    let av: [&[f64; L]; OB] = std::array::from_fn(|k| {
                        a[(o0 + k) * m + c0..(o0 + k) * m + c0 + L]
                            .try_into()
                            .unwrap()
                    });
                    for ii in 0..IB {
                        let bv: &[f64; L] = b[(i0 + ii) * m + c0..(i0 + ii) * m + c0 + L]
                            .try_into()
                            .unwrap();
                        for k in 0..OB {
                            for l in 0..L {
                                acc[k][ii][l] += av[k][l] * bv[l];
                            }
                        }
                    }
                }
                for k in 0..OB {
                    for ii in 0..IB {
                        let (o, i) = (o0 + k, i0 + ii);
                        out[o * ni + i] +=
                            reduce(&acc[k][ii], &a[o * m..(o + 1) * m], &b[i * m..(i + 1) * m]);
                    }
                }
            } else {
                for o in o0..o0 + ob {
                    for i in i0..i0 + ib {
                        let (a_row, b_row) = (&a[o * m..(o + 1) * m], &b[i * m..(i + 1) * m]);
                        let mut lanes = [0.0; L];
                        for c0 in (0..mv).step_by(L) {
                            for l in 0..L {
                                lanes[l] += a_row[c0 + l] * b_row[c0 + l];
                            }
                        }
                        out[o * ni + i] += reduce(&lanes, a_row, b_row);
                    }
                }
            }
            i0 += ib;
        }
        o0 += ob;
    }
}

/// `out[o][c] = Σ_i w[o][i] x[i][c]` for `w: [no][ni]`, `x: [ni][m]`.
/// Blocks of four output rows share each load of `x`.
fn matmul(w: &[f64], x: &[f64], out: &mut [f64], no: usize, ni: usize, m: usize) {
    const RB: usize = 4;
    const CB: usize = 8;
    let full_rows = no / RB * RB;
    let full_cols = m / CB * CB;
    for o0 in (0..full_rows).step_by(RB) {
        for c0 in (0..full_cols).step_by(CB) {
            let mut acc = [[0.0; CB]; RB];
            for i in 0..ni {
                let xs: &[f64; CB] = x[i * m + c0..i * m + c0 + CB].try_into().unwrap();
                for (rr, row) in acc.iter_mut().enumerate() {
                    let wv = w[(o0 + rr) * ni + i];
                    for cc in 0..CB {
                        row[cc] += wv * xs[cc];
                    }
                }
            }
            for (rr, row) in acc.iter().enumerate() {
                out[(o0 + rr) * m + c0..(o0 + rr) * m + c0 + CB].copy_from_slice(row);
            }
        }
        for c in full_cols..m {
            for rr in 0..RB {
                let o = o0 + rr;
                out[o * m + c] = (0..ni).map(|i| w[o * ni + i] * x[i * m + c]).sum();
            }
        }
    }
    for o in full_rows..no {
        let orow = &mut out[o * m..(o + 1) * m];
        orow.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..ni {
            axpy(w[o * ni + i], &x[i * m..(i + 1) * m], orow);
        }
    }
}

impl DynamicsNet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        ctx_dim: usize,
        hidden: &[usize],
    ) -> Self {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let layers: Vec<ConcatSquash> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                ConcatSquash::new(store, &format!("{prefix}.layer{i}"), w[0], w[1], ctx_dim)
            })
            .collect();
        let mut unit_offsets = Vec::with_capacity(layers.len());
        let mut units = 0;
        for l in &layers {
            unit_offsets.push(units);
            units += l.out_dim;
        }
        let max_width = widths.iter().copied().max().unwrap_or(dim);
        Self {
            layers,
            dim,
            ctx_dim,
            unit_offsets,
            units,
            max_width,
        }
    }

    pub fn layers(&self) -> &[ConcatSquash] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx_dim
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(ConcatSquash::n_params).sum()
    }

    /// Total output units over all layers; the length of per-time gate vectors.
    pub(crate) fn units(&self) -> usize {
        self.units
    }

    /// Writes the context part of every layer's gate and hyper-bias
    /// (`units` values each) for a single context vector.
    pub(crate) fn context_terms_into(
        &self,
        params: &[f64],
        w: &[f64],
        gate_base: &mut [f64],
        bias_base: &mut [f64],
    ) {
        for (l, layer) in self.layers.iter().enumerate() {
            let r = self.unit_offsets[l]..self.unit_offsets[l] + layer.out_dim;
            layer.context_terms_into(params, w, &mut gate_base[r.clone()], &mut bias_base[r]);
        }
    }

    pub(crate) fn gates_into(&self, params: &[f64], gate_base: &[f64], t: f64, gates: &mut [f64]) {
        for (l, layer) in self.layers.iter().enumerate() {
            let r = self.unit_offsets[l]..self.unit_offsets[l] + layer.out_dim;
            layer.gates_into(params, &gate_base[r.clone()], t, &mut gates[r]);
        }
    }

    /// Length of one evaluation record for a chunk of `r` rows: the layer-0
    /// input followed by each layer's linear part and activation, every unit
    /// holding its value and `nd` tangents.
    pub(crate) fn record_len(&self, nd: usize, r: usize) -> usize {
        (self.dim + 2 * self.units) * (1 + nd) * r
    }

    fn layer_offset(&self, l: usize, nd: usize, r: usize) -> usize {
        (self.dim + 2 * self.unit_offsets[l]) * (1 + nd) * r
    }

    /// Evaluates `g` for a chunk of `r` rows with states `z` (`[P][r]`).
    /// `gates` and `bias` hold each row's gate values and hyper-bias context
    /// part (`[units][r]`). With directions, writes `Σ_d v_d^T (∂g/∂z) v_d`
    /// per row into `trace`. Intermediates go to `rec` for
    /// [`DynamicsNet::backward_batch`].
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_batch(
        &self,
        params: &[f64],
        r: usize,
        z: &[f64],
        dirs: Dirs<'_>,
        t: f64,
        gates: &[f64],
        bias: &[f64],
        rec: &mut [f64],
        out: &mut [f64],
        trace: &mut [f64],
    ) {
        let nd = dirs.count(self.dim);
        let m = (1 + nd) * r;
        let p = self.dim;
        let x0 = &mut rec[..p * m];
        for i in 0..p {
            let unit = &mut x0[i * m..(i + 1) * m];
            unit[..r].copy_from_slice(&z[i * r..(i + 1) * r]);
            for d in 0..nd {
                let dst = &mut unit[(1 + d) * r..(2 + d) * r];
                match dirs {
                    Dirs::Identity => dst
                        .iter_mut()
                        .for_each(|v| *v = if d == i { 1.0 } else { 0.0 }),
                    Dirs::Explicit { v, .. } => {
                        dst.copy_from_slice(&v[(d * p + i) * r..(d * p + i + 1) * r])
                    }
                    Dirs::None => {}
                }
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (ni, no, k) = (layer.in_dim, layer.out_dim, 1 + layer.ctx_dim);
            let off = self.layer_offset(l, nd, r);
            let (before, cur) = rec.split_at_mut(off);
            let h = &before[before.len() - ni * m..];
            let (lin, rest) = cur.split_at_mut(no * m);
            let act_out = &mut rest[..no * m];
            let b = layer.b.of(params);
            let wb = layer.wb.of(params);
            let u0 = self.unit_offsets[l];
            matmul(layer.w.of(params), h, lin, no, ni, m);
            for o in 0..no {
                let lrow = &mut lin[o * m..(o + 1) * m];
                lrow[..r].iter_mut().for_each(|v| *v += b[o]);
                let g = &gates[(u0 + o) * r..(u0 + o + 1) * r];
                let bb = &bias[(u0 + o) * r..(u0 + o + 1) * r];
                let tb = wb[o * k] * t;
                let arow = &mut act_out[o * m..(o + 1) * m];
                let (av, ad) = arow.split_at_mut(r);
                let (lv, lt) = lrow.split_at(r);
                if l + 1 == self.layers.len() {
                    for j in 0..r {
                        av[j] = lv[j] * g[j] + bb[j] + tb;
                    }
                    for (adr, qr) in ad.chunks_exact_mut(r).zip(lt.chunks_exact(r)) {
                        for j in 0..r {
                            adr[j] = g[j] * qr[j];
                        }
                    }
                } else {
                    for j in 0..r {
                        av[j] = tanh(lv[j] * g[j] + bb[j] + tb);
                    }
                    for (adr, qr) in ad.chunks_exact_mut(r).zip(lt.chunks_exact(r)) {
                        for j in 0..r {
                            adr[j] = (1.0 - av[j] * av[j]) * g[j] * qr[j];
                        }
                    }
                }
            }
        }
        let base = self.layer_offset(self.layers.len() - 1, nd, r) + p * m;
        let last = &rec[base..base + p * m];
        for i in 0..p {
            out[i * r..(i + 1) * r].copy_from_slice(&last[i * m..i * m + r]);
        }
        if nd > 0 {
            trace[..r].iter_mut().for_each(|v| *v = 0.0);
            match dirs {
                Dirs::Identity => {
                    for i in 0..p {
                        axpy(
                            1.0,
                            &last[i * m + (1 + i) * r..i * m + (2 + i) * r],
                            &mut trace[..r],
                        );
                    }
                }
                Dirs::Explicit { v, .. } => {
                    for d in 0..nd {
                        for i in 0..p {
                            let vv = &v[(d * p + i) * r..(d * p + i + 1) * r];
                            let aa = &last[i * m + (1 + d) * r..i * m + (2 + d) * r];
                            for j in 0..r {
                                trace[j] += vv[j] * aa[j];
                            }
                        }
                    }
                }
                Dirs::None => {}
            }
        }
    }

    /// Reverse pass of [`DynamicsNet::forward_batch`]. Given output adjoints
    /// `g_bar` (`[P][r]`) and per-row trace adjoints `tau_bar`, accumulates
    /// `W`/`b` gradients into `grads`, per-row gate/hyper-bias sums into `acc`
    /// (`[4][units][r]`: `Σ u_bar`, `Σ t u_bar`, `Σ v_bar`, `Σ t v_bar`) and
    /// the state adjoint into `z_bar`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_batch(
        &self,
        params: &[f64],
        grads: &mut [f64],
        r: usize,
        dirs: Dirs<'_>,
        t: f64,
        gates: &[f64],
        rec: &[f64],
        g_bar: &[f64],
        tau_bar: &[f64],
        z_bar: &mut [f64],
        acc: &mut [f64],
        s: &mut BackScratch,
    ) {
        let nd = dirs.count(self.dim);
        let m = (1 + nd) * r;
        let mw = self.max_width;
        let p = self.dim;
        let u_all = self.units;
        s.a_bar.resize(mw * m, 0.0);
        s.h_bar.resize(mw * m, 0.0);
        s.p_bar.resize(mw * m, 0.0);
        s.wt.resize(mw * mw, 0.0);
        s.y_bar.resize(r, 0.0);
        s.gate_bar.resize(r, 0.0);

        for i in 0..p {
            let unit = &mut s.a_bar[i * m..(i + 1) * m];
            unit[..r].copy_from_slice(&g_bar[i * r..(i + 1) * r]);
            for d in 0..nd {
                let dst = &mut unit[(1 + d) * r..(2 + d) * r];
                match dirs {
                    Dirs::Identity => {
                        if d == i {
                            dst.copy_from_slice(&tau_bar[..r]);
                        } else {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    Dirs::Explicit { v, .. } => {
                        let vv = &v[(d * p + i) * r..(d * p + i + 1) * r];
                        for j in 0..r {
                            dst[j] = tau_bar[j] * vv[j];
                        }
                    }
                    Dirs::None => {}
                }
            }
        }

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (ni, no) = (layer.in_dim, layer.out_dim);
            let base = self.layer_offset(l, nd, r);
            let lin = &rec[base..base + no * m];
            let act_out = &rec[base + no * m..base + 2 * no * m];
            let h = &rec[base - ni * m..base];
            let tanh_layer = l + 1 < self.layers.len();
            let u0 = self.unit_offsets[l];
            let w_off = layer.w.offset;
            let b_off = layer.b.offset;

            for o in 0..no {
                let u = u0 + o;
                let g = &gates[u * r..(u + 1) * r];
                let ab = &s.a_bar[o * m..(o + 1) * m];
                let (lv, lt) = lin[o * m..(o + 1) * m].split_at(r);
                let av = &act_out[o * m..o * m + r];
                let pb = &mut s.p_bar[o * m..(o + 1) * m];
                let (y_bar, gate_bar) = (&mut s.y_bar[..r], &mut s.gate_bar[..r]);
                if tanh_layer {
                    for j in 0..r {
                        y_bar[j] = ab[j] * (1.0 - av[j] * av[j]);
                        gate_bar[j] = 0.0;
                    }
                    for d in 0..nd {
                        let adb = &ab[(1 + d) * r..(2 + d) * r];
                        let q = &lt[d * r..(d + 1) * r];
                        let qb = &mut pb[(1 + d) * r..(2 + d) * r];
                        for j in 0..r {
                            let dj = 1.0 - av[j] * av[j];
                            y_bar[j] -= 2.0 * adb[j] * q[j] * g[j] * av[j] * dj;
                            gate_bar[j] += adb[j] * dj * q[j];
                            qb[j] = adb[j] * dj * g[j];
                        }
                    }
                } else {
                    y_bar.copy_from_slice(&ab[..r]);
                    gate_bar.iter_mut().for_each(|v| *v = 0.0);
                    for d in 0..nd {
                        let adb = &ab[(1 + d) * r..(2 + d) * r];
                        let q = &lt[d * r..(d + 1) * r];
                        let qb = &mut pb[(1 + d) * r..(2 + d) * r];
                        for j in 0..r {
                            gate_bar[j] += adb[j] * q[j];
                            qb[j] = adb[j] * g[j];
                        }
                    }
                }
                let (su, rest) = acc[u * r..].split_at_mut(u_all * r);
                let (tu, rest) = rest.split_at_mut(u_all * r);
                let (sv, tv) = rest.split_at_mut(u_all * r);
                for j in 0..r {
                    let u_bar = (gate_bar[j] + y_bar[j] * lv[j]) * g[j] * (1.0 - g[j]);
                    pb[j] = y_bar[j] * g[j];
                    su[j] += u_bar;
                    tu[j] += t * u_bar;
                    sv[j] += y_bar[j];
                    tv[j] += t * y_bar[j];
                }
                grads[b_off + o] += pb[..r].iter().sum::<f64>();
            }
            matmul_nt_acc(
                &s.p_bar[..no * m],
                h,
                &mut grads[w_off..w_off + no * ni],
                no,
                ni,
                m,
            );
            let w = layer.w.of(params);
            for o in 0..no {
                for i in 0..ni {
                    s.wt[i * no + o] = w[o * ni + i];
                }
            }
            matmul(
                &s.wt[..ni * no],
                &s.p_bar[..no * m],
                &mut s.h_bar[..ni * m],
                ni,
                no,
                m,
            );
            if l == 0 {
                for i in 0..p {
                    axpy(
                        1.0,
                        &s.h_bar[i * m..i * m + r],
                        &mut z_bar[i * r..(i + 1) * r],
                    );
                }
            } else {
                s.a_bar[..ni * m].copy_from_slice(&s.h_bar[..ni * m]);
            }
        }
    }

    /// Turns per-row gate/hyper-bias sums (`[4][units][r]`) into gradients of
    /// the context-path weights and adds each row's context adjoint into
    /// `w_bar` (row-major `[r][C]`). `ctx` is row-major `[r][C]`.
    pub(crate) fn context_backward_batch(
        &self,
        params: &[f64],
        grads: &mut [f64],
        r: usize,
        ctx: &[f64],
        acc: &[f64],
        w_bar: &mut [f64],
    ) {
        let c = self.ctx_dim;
        let ua = self.units;
        for (l, layer) in self.layers.iter().enumerate() {
            let k = 1 + c;
            let wg = layer.wg.of(params);
            let wb = layer.wb.of(params);
            for o in 0..layer.out_dim {
                let u = self.unit_offsets[l] + o;
                let su = &acc[u * r..(u + 1) * r];
                let tu = &acc[(ua + u) * r..(ua + u + 1) * r];
                let sv = &acc[(2 * ua + u) * r..(2 * ua + u + 1) * r];
                let tv = &acc[(3 * ua + u) * r..(3 * ua + u + 1) * r];
                {
                    let gwg = layer.wg.of_mut(grads);
                    gwg[o * k] += tu.iter().sum::<f64>();
                    for j in 0..r {
                        axpy(
                            su[j],
                            &ctx[j * c..(j + 1) * c],
                            &mut gwg[o * k + 1..(o + 1) * k],
                        );
                    }
                }
                layer.bg.of_mut(grads)[o] += su.iter().sum::<f64>();
                {
                    let gwb = layer.wb.of_mut(grads);
                    gwb[o * k] += tv.iter().sum::<f64>();
                    for j in 0..r {
                        axpy(
                            sv[j],
                            &ctx[j * c..(j + 1) * c],
                            &mut gwb[o * k + 1..(o + 1) * k],
                        );
                    }
                }
                let wg_row = &wg[o * k + 1..(o + 1) * k];
                let wb_row = &wb[o * k + 1..(o + 1) * k];
                for j in 0..r {
                    let wrow = &mut w_bar[j * c..(j + 1) * c];
                    axpy(su[j], wg_row, wrow);
                    axpy(sv[j], wb_row, wrow);
                }
            }
        }
    }

    /// Gate values and hyper-bias context parts for a single row, laid out
    /// as a chunk of one.
    fn single_row_terms(&self, params: &[f64], w: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let u = self.units;
        let (mut gate_base, mut bias) = (vec![0.0; u], vec![0.0; u]);
        self.context_terms_into(params, w, &mut gate_base, &mut bias);
        let mut gates = vec![0.0; u];
        self.gates_into(params, &gate_base, t, &mut gates);
        (gates, bias)
    }

    /// Plain evaluation of `g(z, t, w)`.
    pub fn eval(&self, params: &[f64], z: &[f64], t: f64, w: &[f64], out: &mut [f64]) {
        let (gates, bias) = self.single_row_terms(params, w, t);
        let mut rec = vec![0.0; self.record_len(0, 1)];
        self.forward_batch(
            params,
            1,
            z,
            Dirs::None,
            t,
            &gates,
            &bias,
            &mut rec,
            out,
            &mut [0.0],
        );
    }

    /// Exact `tr(∂g/∂z)` at `(z, t, w)`, one forward tangent per coordinate.
    pub fn exact_trace(&self, params: &[f64], z: &[f64], t: f64, w: &[f64]) -> f64 {
        let (gates, bias) = self.single_row_terms(params, w, t);
        let mut rec = vec![0.0; self.record_len(self.dim, 1)];
        let mut out = vec![0.0; self.dim];
        let mut tr = [0.0];
        self.forward_batch(
            params,
            1,
            z,
            Dirs::Identity,
            t,
            &gates,
            &bias,
            &mut rec,
            &mut out,
            &mut tr,
        );
        tr[0]
    }
}
