// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward engine shared by training, teacher forcing and incremental
//! decoding, plus the matching backward pass.
//!
//! [`extend`] appends new rows to one or more sequences. A full forward is an
//! `extend` on fresh states; a decoding step is an `extend` of one row on a
//! warm state. Both run the same per-row arithmetic, so the logits of a
//! position never depend on how the rows were grouped.

use crate::tensor::{dot, matmul, matmul_at_acc, matmul_bt, Matrix};

use super::{HiddenStates, InjectionSpec, ModelConfig, ModelParams};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub type Gradients = ModelParams;

/// Per-sequence decoding state: cached keys/values and hidden-state taps.
#[derive(Clone, Debug)]
pub struct SeqState {
    len: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    hidden: Vec<Matrix>,
}

impl SeqState {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            len: 0,
            keys: vec![Matrix::zeros(0, d); config.layers],
            values: vec![Matrix::zeros(0, d); config.layers],
            hidden: vec![Matrix::zeros(0, d); config.layers + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Hidden state of `layer` (0 = embeddings) at `position`.
    pub fn hidden_at(&self, layer: usize, position: usize) -> &[f64] {
        self.hidden[layer].row(position)
    }

    pub fn hidden(&self) -> HiddenStates {
        HiddenStates {
            layers: self.hidden.clone(),
        }
    }

    pub fn into_hidden(self) -> HiddenStates {
        HiddenStates { layers: self.hidden }
    }
}

struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, NormCache) {
    let (rows, cols) = x.shape();
    let mut y = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..cols {
            yr[j] = xhat.get(i, j) * g[j] + b[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Matrix, cache: &NormCache, g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Matrix {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Matrix::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..cols {
            dxhat[j] = dyr[j] * g[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..cols {
            out[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerTape {
    ln1: NormCache,
    a: Matrix,
    qkv: Matrix,
    /// Attention weights per (row, head), over keys `0..=pos`.
    probs: Vec<Vec<f64>>,
    att: Matrix,
    ln2: NormCache,
    m: Matrix,
    pre: Matrix,
    act: Matrix,
}

/// Intermediates of a fresh-state forward, consumed by [`backward`].
pub struct ForwardTape {
    owners: Vec<(usize, usize)>,
    seq_base: Vec<usize>,
    layers: Vec<LayerTape>,
    lnf: Option<NormCache>,
    y: Matrix,
}

impl ForwardTape {
    pub fn new() -> Self {
        Self {
            owners: Vec::new(),
            seq_base: Vec::new(),
            layers: Vec::new(),
            lnf: None,
            y: Matrix::zeros(0, 0),
        }
    }

    /// Row of the stacked batch holding position `pos` of sequence `seq`.
    pub fn row_of(&self, seq: usize, pos: usize) -> usize {
        self.seq_base[seq] + pos
    }

    pub fn num_rows(&self) -> usize {
        self.owners.len()
    }
}

impl Default for ForwardTape {
    fn default() -> Self {
        Self::new()
    }
}

/// Appends `inputs[s]` (already embedded rows) to `states[s]` and returns
/// the next-token logits of the new rows, one matrix per sequence.
///
/// When `tape` is given, every state must be fresh; the tape then holds what
/// [`backward`] needs.
pub fn extend(
    params: &ModelParams,
    states: &mut [&mut SeqState],
    inputs: &[Matrix],
    injection: Option<&InjectionSpec>,
    mut tape: Option<&mut ForwardTape>,
) -> Vec<Matrix> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    assert_eq!(states.len(), inputs.len());
    let injection = injection.filter(|inj| !inj.is_noop());

    let mut owners = Vec::new();
    let mut x = Matrix::zeros(0, d);
    let mut counts = Vec::with_capacity(inputs.len());
    for (s, inp) in inputs.iter().enumerate() {
        assert_eq!(inp.cols(), d, "input width");
        let start = states[s].len;
        for (j, row) in inp.rows_iter().enumerate() {
            x.push_row(row);
            owners.push((s, start + j));
        }
        counts.push(inp.rows());
    }
    if let Some(t) = tape.as_deref_mut() {
        assert!(states.iter().all(|s| s.len == 0), "taped forward needs fresh states");
        t.owners = owners.clone();
        t.seq_base = counts
            .iter()
            .scan(0, |acc, &c| {
                let b = *acc;
                *acc += c;
                Some(b)
            })
            .collect();
        t.layers.clear();
    }
    for (r, &(s, _)) in owners.iter().enumerate() {
        states[s].hidden[0].push_row(x.row(r));
    }

    let mut probs_scratch: Vec<f64> = Vec::new();
    for l in 0..cfg.layers {
        let lp = &params.layers[l];
        let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let mut qkv = matmul(&a, &lp.w_qkv);
        qkv.add_row_vector(&lp.b_qkv);
        for (r, &(s, _)) in owners.iter().enumerate() {
            let row = qkv.row(r);
            states[s].keys[l].push_row(&row[d..2 * d]);
            states[s].values[l].push_row(&row[2 * d..3 * d]);
        }
        let mut att = Matrix::zeros(owners.len(), d);
        let mut probs_tape = Vec::new();
        for (r, &(s, p)) in owners.iter().enumerate() {
            let keys = &states[s].keys[l];
            let values = &states[s].values[l];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let q = &qkv.row(r)[cols.clone()];
                probs_scratch.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=p {
                    let sc = dot(q, &keys.row(j)[cols.clone()]) * scale;
                    max = max.max(sc);
                    probs_scratch.push(sc);
                }
                let mut total = 0.0;
                for v in probs_scratch.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in probs_scratch.iter_mut() {
                    *v /= total;
                }
                let out = &mut att.row_mut(r)[cols.clone()];
                for (j, &w) in probs_scratch.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&values.row(j)[cols.clone()]) {
                        *o += w * vv;
                    }
                }
                if tape.is_some() {
                    probs_tape.push(probs_scratch.clone());
                }
            }
        }
        let mut o = matmul(&att, &lp.w_o);
        o.add_row_vector(&lp.b_o);
        let mut x_mid = x.clone();
        x_mid.add_assign(&o);
        let (m, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let mut pre = matmul(&m, &lp.w_fc1);
        pre.add_row_vector(&lp.b_fc1);
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut f = matmul(&act, &lp.w_fc2);
        f.add_row_vector(&lp.b_fc2);
        let mut x_out = x_mid;
        x_out.add_assign(&f);
        if let Some(inj) = injection {
            if let Some(delta) = inj.scaled(l + 1) {
                for (r, &(_, p)) in owners.iter().enumerate() {
                    if p >= inj.start_position {
                        for (v, dv) in x_out.row_mut(r).iter_mut().zip(&delta) {
                            *v += dv;
                        }
                    }
                }
            }
        }
        for (r, &(s, _)) in owners.iter().enumerate() {
            states[s].hidden[l + 1].push_row(x_out.row(r));
        }
        if let Some(t) = tape.as_deref_mut() {
            t.layers.push(LayerTape {
                ln1,
                a,
                qkv,
                probs: probs_tape,
                att,
                ln2,
                m,
                pre,
                act,
            });
        }
        x = x_out;
    }
    for (s, &c) in counts.iter().enumerate() {
        states[s].len += c;
    }

    let (y, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let mut logits = matmul(&y, &params.unembed);
    logits.add_row_vector(&params.unembed_b);
    if let Some(t) = tape {
        t.lnf = Some(lnf);
        t.y = y;
    }

    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for c in counts {
        out.push(logits.slice_rows(start, start + c));
        start += c;
    }
    out
}

/// Backpropagates `dlogits` (stacked rows, same order as the taped forward).
///
/// Accumulates parameter gradients into `grads` (embedding tables excluded:
/// the caller owns how input rows were built) and returns the gradient with
/// respect to the input rows.
pub fn backward(params: &ModelParams, tape: &ForwardTape, dlogits: &Matrix, grads: &mut Gradients) -> Matrix {
    let cfg = &params.config;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let heads = cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    assert_eq!(dlogits.rows(), tape.num_rows());

    matmul_at_acc(&tape.y, dlogits, &mut grads.unembed);
    for (g, v) in grads.unembed_b.iter_mut().zip(dlogits.column_sums()) {
        *g += v;
    }
    let dy = matmul_bt(dlogits, &params.unembed);
    let lnf = tape.lnf.as_ref().expect("tape holds final norm");
    let mut dx = layer_norm_backward(&dy, lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

    for l in (0..cfg.layers).rev() {
        let lp = &params.layers[l];
        let lt = &tape.layers[l];
        let gl = &mut grads.layers[l];

        // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        matmul_at_acc(&lt.act, &dx, &mut gl.w_fc2);
        for (g, v) in gl.b_fc2.iter_mut().zip(dx.column_sums()) {
            *g += v;
        }
        let mut dpre = matmul_bt(&dx, &lp.w_fc2);
        for (g, &p) in dpre.data_mut().iter_mut().zip(lt.pre.data()) {
            *g *= gelu_grad(p);
        }
        matmul_at_acc(&lt.m, &dpre, &mut gl.w_fc1);
        for (g, v) in gl.b_fc1.iter_mut().zip(dpre.column_sums()) {
            *g += v;
        }
        let dm = matmul_bt(&dpre, &lp.w_fc1);
        let dnorm2 = layer_norm_backward(&dm, &lt.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let mut dx_mid = dx;
        dx_mid.add_assign(&dnorm2);

        // x_mid = x_in + attn(ln1(x_in))
        matmul_at_acc(&lt.att, &dx_mid, &mut gl.w_o);
        for (g, v) in gl.b_o.iter_mut().zip(dx_mid.column_sums()) {
            *g += v;
        }
        let datt = matmul_bt(&dx_mid, &lp.w_o);
        let mut dqkv = Matrix::zeros(tape.num_rows(), 3 * d);
        let mut dp = Vec::new();
        for (r, &(s, p)) in tape.owners.iter().enumerate() {
            for h in 0..heads {
                let probs = &lt.probs[r * heads + h];
                let dout = &datt.row(r)[h * dh..(h + 1) * dh];
                dp.clear();
                for j in 0..=p {
                    let rj = tape.row_of(s, j);
                    dp.push(dot(dout, &lt.qkv.row(rj)[2 * d + h * dh..2 * d + (h + 1) * dh]));
                }
                let mix: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..=p {
                    let rj = tape.row_of(s, j);
                    let ds = probs[j] * (dp[j] - mix) * scale;
                    for c in 0..dh {
                        let qc = lt.qkv.get(r, h * dh + c);
                        let kc = lt.qkv.get(rj, d + h * dh + c);
                        let dq = dqkv.get(r, h * dh + c) + ds * kc;
                        dqkv.set(r, h * dh + c, dq);
                        let dk = dqkv.get(rj, d + h * dh + c) + ds * qc;
                        dqkv.set(rj, d + h * dh + c, dk);
                        let dv = dqkv.get(rj, 2 * d + h * dh + c) + probs[j] * dout[c];
                        dqkv.set(rj, 2 * d + h * dh + c, dv);
                    }
                }
            }
        }
        matmul_at_acc(&lt.a, &dqkv, &mut gl.w_qkv);
        for (g, v) in gl.b_qkv.iter_mut().zip(dqkv.column_sums()) {
            *g += v;
        }
        let da = matmul_bt(&dqkv, &lp.w_qkv);
        let dnorm1 = layer_norm_backward(&da, &lt.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        dx = dx_mid;
        dx.add_assign(&dnorm1);
    }
    dx
}
