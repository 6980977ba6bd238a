//! Forward pass with cached intermediates, and its exact reverse-mode gradient.

use super::{log_softmax_at, Model, Params};
use crate::corpus::TokenId;
use crate::numerics::{gemm, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Replaces the MLP output of `layer` at `position` with `value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub layer: usize,
    pub position: usize,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub x: Matrix,
    xhat: Matrix,
    rstd: Vec<f64>,
    n: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    att: Matrix,
    pre: Matrix,
    pub key: Matrix,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub tokens: Vec<TokenId>,
    pub(crate) layers: Vec<LayerCache>,
    intervention: Option<Intervention>,
    final_x: Matrix,
    final_xhat: Matrix,
    final_rstd: Vec<f64>,
    final_n: Matrix,
    pub logits: Matrix,
}

impl Trace {
    /// Residual stream entering `layer` (`T × d_model`).
    pub fn residual_in(&self, layer: usize) -> &Matrix {
        &self.layers[layer].x
    }

    /// Residual stream after the last layer.
    pub fn residual_final(&self) -> &Matrix {
        &self.final_x
    }

    /// MLP keys of `layer` (`T × d_mlp`).
    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.layers[layer].key
    }
}

fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut y = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let (g, b) = (g.data(), b.data());
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let yr = y.row_mut(r);
        for c in 0..d {
            yr[c] = xhat.get(r, c) * g[c] + b[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns `dx`; accumulates into `dg`, `db`.
fn layer_norm_backward(dy: &Matrix, xhat: &Matrix, rstd: &[f64], g: &Matrix, dg: &mut Matrix, db: &mut Matrix) -> Matrix {
    let (t, d) = dy.shape();
    let mut dx = Matrix::zeros(t, d);
    let g = g.data();
    let mut dxhat = vec![0.0; d];
    for r in 0..t {
        let dyr = dy.row(r);
        let xr = xhat.row(r);
        {
            let dgd = dg.data_mut();
            for c in 0..d {
                dgd[c] += dyr[c] * xr[c];
            }
        }
        {
            let dbd = db.data_mut();
            for c in 0..d {
                dbd[c] += dyr[c];
            }
        }
        for c in 0..d {
            dxhat[c] = dyr[c] * g[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
        }
    }
    dx
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `x · Wᵀ` for a weight stored `out × in`.
fn linear(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    gemm(1.0, x, false, w, true, 0.0, &mut out);
    out
}

fn embed(model: &Model, tokens: &[TokenId]) -> Matrix {
    let d = model.config.d_model;
    let p = &model.params;
    let mut h = Matrix::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = h.row_mut(t);
        let (e, pe) = (p.tok_emb.row(tok), p.pos_emb.row(t));
        for c in 0..d {
            row[c] = e[c] + pe[c];
        }
    }
    h
}

/// Causal multi-head attention on already-projected q, k, v.
fn attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> (Vec<Matrix>, Matrix) {
    let (t, d) = q.shape();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut att = Matrix::zeros(t, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * hd;
        let mut p = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[off..off + hd];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = scale * qi.iter().zip(&k.row(j)[off..off + hd]).map(|(a, b)| a * b).sum::<f64>();
                row[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for x in row.iter_mut().take(i + 1) {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut().take(i + 1) {
                *x /= z;
            }
        }
        for i in 0..t {
            let mut acc = vec![0.0; hd];
            for j in 0..=i {
                let pij = p.get(i, j);
                for (a, b) in acc.iter_mut().zip(&v.row(j)[off..off + hd]) {
                    *a += pij * b;
                }
            }
            att.row_mut(i)[off..off + hd].copy_from_slice(&acc);
        }
        probs.push(p);
    }
    (probs, att)
}

fn layer_forward(model: &Model, l: usize, x: Matrix, intervention: Option<&Intervention>) -> (LayerCache, Matrix) {
    let lp = &model.params.layers[l];
    let (n, xhat, rstd) = layer_norm(&x, &lp.ln_g, &lp.ln_b);
    let q = linear(&n, &lp.w_q);
    let k = linear(&n, &lp.w_k);
    let v = linear(&n, &lp.w_v);
    let (probs, att) = attention(&q, &k, &v, model.config.n_heads);
    let attn_out = linear(&att, &lp.w_o);
    let mut pre = linear(&n, &lp.w_in);
    let b_in = lp.b_in.data();
    for r in 0..pre.rows() {
        for (x, b) in pre.row_mut(r).iter_mut().zip(b_in) {
            *x += b;
        }
    }
    let mut key = pre.clone();
    key.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
    let mut mlp = linear(&key, &lp.w_out);
    if let Some(iv) = intervention.filter(|iv| iv.layer == l) {
        mlp.row_mut(iv.position).copy_from_slice(&iv.value);
    }
    let mut out = x.clone();
    out.axpy(1.0, &attn_out);
    out.axpy(1.0, &mlp);
    (LayerCache { x, xhat, rstd, n, q, k, v, probs, att, pre, key }, out)
}

pub(crate) fn forward(model: &Model, tokens: &[TokenId], intervention: Option<&Intervention>) -> Trace {
    let mut h = embed(model, tokens);
    let mut layers = Vec::with_capacity(model.config.n_layers);
    for l in 0..model.config.n_layers {
        let (cache, out) = layer_forward(model, l, h, intervention);
        layers.push(cache);
        h = out;
    }
    let p = &model.params;
    let (final_n, final_xhat, final_rstd) = layer_norm(&h, &p.lnf_g, &p.lnf_b);
    let logits = linear(&final_n, &p.head);
    Trace {
        tokens: tokens.to_vec(),
        layers,
        intervention: intervention.cloned(),
        final_x: h,
        final_xhat,
        final_rstd,
        final_n,
        logits,
    }
}

/// Forward up to the MLP of `layer`, returning its keys; later layers are never touched.
pub(crate) fn forward_keys(model: &Model, tokens: &[TokenId], layer: usize) -> Matrix {
    let mut h = embed(model, tokens);
    for l in 0..layer {
        h = layer_forward(model, l, h, None).1;
    }
    let lp = &model.params.layers[layer];
    let (n, _, _) = layer_norm(&h, &lp.ln_g, &lp.ln_b);
    let mut pre = linear(&n, &lp.w_in);
    let b_in = lp.b_in.data();
    for r in 0..pre.rows() {
        for (x, b) in pre.row_mut(r).iter_mut().zip(b_in) {
            *x = gelu(*x + b);
        }
    }
    pre
}

/// Gradients from one backward pass.
pub struct Backward {
    /// Parameter gradients (absent when only residual gradients were requested).
    pub params: Option<Params>,
    /// `∂loss/∂(output residual of layer l)` for every layer at or above the stop layer.
    pub residual_out: Vec<Option<Matrix>>,
}

/// Reverse pass from `dlogits`. Stops after layer `stop_at` when parameter gradients are not wanted.
pub(crate) fn backward(model: &Model, trace: &Trace, dlogits: &Matrix, want_params: bool, stop_at: usize) -> Backward {
    let cfg = &model.config;
    let p = &model.params;
    let t = trace.tokens.len();
    let mut grads = want_params.then(|| Params::zeros(cfg, model.vocab_size()));
    let (mut dg_f, mut db_f) = (Matrix::zeros(1, cfg.d_model), Matrix::zeros(1, cfg.d_model));

    if let Some(g) = grads.as_mut() {
        gemm(1.0, dlogits, true, &trace.final_n, false, 0.0, &mut g.head);
    }
    let mut dn = Matrix::zeros(t, cfg.d_model);
    gemm(1.0, dlogits, false, &p.head, false, 0.0, &mut dn);
    let mut dh = layer_norm_backward(&dn, &trace.final_xhat, &trace.final_rstd, &p.lnf_g, &mut dg_f, &mut db_f);
    if let Some(g) = grads.as_mut() {
        g.lnf_g = dg_f;
        g.lnf_b = db_f;
    }

    let mut residual_out = vec![None; cfg.n_layers];
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let lowest = if want_params { 0 } else { stop_at };
    for l in (lowest..cfg.n_layers).rev() {
        residual_out[l] = Some(dh.clone());
        if !want_params && l == stop_at {
            break;
        }
        let c = &trace.layers[l];
        let lp = &p.layers[l];
        let mut dx = dh.clone();

        // MLP branch.
        let mut dmlp = dh.clone();
        if let Some(iv) = trace.intervention.as_ref().filter(|iv| iv.layer == l) {
            dmlp.row_mut(iv.position).fill(0.0);
        }
        let mut dkey = Matrix::zeros(t, cfg.d_mlp);
        gemm(1.0, &dmlp, false, &lp.w_out, false, 0.0, &mut dkey);
        let mut dpre = dkey;
        for (dv, &x) in dpre.data_mut().iter_mut().zip(c.pre.data()) {
            *dv *= gelu_grad(x);
        }
        let mut dn = Matrix::zeros(t, cfg.d_model);
        gemm(1.0, &dpre, false, &lp.w_in, false, 0.0, &mut dn);

        // Attention branch.
        let mut datt = Matrix::zeros(t, cfg.d_model);
        gemm(1.0, &dh, false, &lp.w_o, false, 0.0, &mut datt);
        let mut dq = Matrix::zeros(t, cfg.d_model);
        let mut dk = Matrix::zeros(t, cfg.d_model);
        let mut dv = Matrix::zeros(t, cfg.d_model);
        for (h, probs) in c.probs.iter().enumerate() {
            let off = h * hd;
            for i in 0..t {
                let da = &datt.row(i)[off..off + hd];
                // dP_ij = da_i · v_j, then softmax backward.
                let mut dp = vec![0.0; i + 1];
                let mut dot_pdp = 0.0;
                for j in 0..=i {
                    let vj = &c.v.row(j)[off..off + hd];
                    dp[j] = da.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot_pdp += probs.get(i, j) * dp[j];
                }
                for j in 0..=i {
                    let pij = probs.get(i, j);
                    // dv_j += P_ij · da_i
                    for (o, a) in dv.row_mut(j)[off..off + hd].iter_mut().zip(da) {
                        *o += pij * a;
                    }
                    let ds = pij * (dp[j] - dot_pdp) * scale;
                    if ds != 0.0 {
                        let kj: Vec<f64> = c.k.row(j)[off..off + hd].to_vec();
                        let qi: Vec<f64> = c.q.row(i)[off..off + hd].to_vec();
                        for (o, kk) in dq.row_mut(i)[off..off + hd].iter_mut().zip(&kj) {
                            *o += ds * kk;
                        }
                        for (o, qq) in dk.row_mut(j)[off..off + hd].iter_mut().zip(&qi) {
                            *o += ds * qq;
                        }
                    }
                }
            }
        }
        gemm(1.0, &dq, false, &lp.w_q, false, 1.0, &mut dn);
        gemm(1.0, &dk, false, &lp.w_k, false, 1.0, &mut dn);
        gemm(1.0, &dv, false, &lp.w_v, false, 1.0, &mut dn);

        let mut unused = (Matrix::zeros(1, cfg.d_model), Matrix::zeros(1, cfg.d_model));
        let (dg, db) = match grads.as_mut() {
            Some(g) => {
                let gl = &mut g.layers[l];
                gemm(1.0, &dmlp, true, &c.key, false, 0.0, &mut gl.w_out);
                gemm(1.0, &dpre, true, &c.n, false, 0.0, &mut gl.w_in);
                let bd = gl.b_in.data_mut();
                for r in 0..t {
                    for (b, x) in bd.iter_mut().zip(dpre.row(r)) {
                        *b += x;
                    }
                }
                gemm(1.0, &dh, true, &c.att, false, 0.0, &mut gl.w_o);
                gemm(1.0, &dq, true, &c.n, false, 0.0, &mut gl.w_q);
                gemm(1.0, &dk, true, &c.n, false, 0.0, &mut gl.w_k);
                gemm(1.0, &dv, true, &c.n, false, 0.0, &mut gl.w_v);
                (&mut gl.ln_g, &mut gl.ln_b)
            }
            None => (&mut unused.0, &mut unused.1),
        };
        let dx_ln = layer_norm_backward(&dn, &c.xhat, &c.rstd, &lp.ln_g, dg, db);
        dx.axpy(1.0, &dx_ln);
        dh = dx;
    }

    if let Some(g) = grads.as_mut() {
        for (pos, &tok) in trace.tokens.iter().enumerate() {
            let row = dh.row(pos).to_vec();
            for (a, b) in g.tok_emb.row_mut(tok).iter_mut().zip(&row) {
                *a += b;
            }
            for (a, b) in g.pos_emb.row_mut(pos).iter_mut().zip(&row) {
                *a += b;
            }
        }
    }
    Backward { params: grads, residual_out }
}

/// Softmax cross-entropy gradient for weighted positions.
///
/// `weights[t]` scales the loss of predicting `tokens[t + 1]` from position `t`;
/// negative weights give the reverse (unlearning) loss. Returns the weighted
/// loss sum and `∂loss/∂logits`.
pub(crate) fn weighted_ce(logits: &Matrix, tokens: &[TokenId], weights: &[f64]) -> (f64, Matrix) {
    let (t, v) = logits.shape();
    let mut dlogits = Matrix::zeros(t, v);
    let mut loss = 0.0;
    for (pos, &w) in weights.iter().enumerate().take(t.saturating_sub(1)) {
        if w == 0.0 {
            continue;
        }
        let row = logits.row(pos);
        let target = tokens[pos + 1];
        loss += -w * log_softmax_at(row, target);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let out = dlogits.row_mut(pos);
        for (o, x) in out.iter_mut().zip(row) {
            *o = w * (x - max).exp() / z;
        }
        out[target] -= w;
    }
    (loss, dlogits)
}

/// Weighted next-token loss and full parameter gradient for one sequence.
pub fn loss_and_grad(model: &Model, tokens: &[TokenId], weights: &[f64]) -> crate::Result<(f64, Params)> {
    let trace = model.trace(tokens, None)?;
    let (loss, dlogits) = weighted_ce(&trace.logits, tokens, weights);
    let back = backward(model, &trace, &dlogits, true, 0);
    Ok((loss, back.params.expect("parameter gradients requested")))
}

/// `∂loss/∂value` for an MLP-output intervention, plus the loss.
pub(crate) fn intervention_grad(model: &Model, tokens: &[TokenId], iv: &Intervention, weights: &[f64]) -> crate::Result<(f64, Vec<f64>, Matrix)> {
    let trace = model.trace(tokens, Some(iv))?;
    let (loss, dlogits) = weighted_ce(&trace.logits, tokens, weights);
    let back = backward(model, &trace, &dlogits, false, iv.layer);
    let d = back.residual_out[iv.layer].as_ref().expect("stop layer gradient");
    Ok((loss, d.row(iv.position).to_vec(), trace.logits))
}
