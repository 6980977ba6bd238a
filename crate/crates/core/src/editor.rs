//! Closed-form batch editing of `W_out`, spread over a range of layers.
//!
//! For keys `K_e` and desired outputs `V_e` at one layer, the update that
//! best keeps old associations (summarized by `λC₀`) while writing the new
//! ones is
//!
//! ```text
//! R = V_e − W₀ K_e
//! Δ = R K_eᵀ (λC₀ + K_e K_eᵀ)⁻¹
//! ```
//!
//! Across layers `l₀−|ℛ|+1 ..= l₀` the residual measured once at `l₀` is
//! split so layer `l` takes `R / (l₀ − l + 1)`, working upward and
//! recomputing keys after every applied layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{render, FactTriple, RenderMode, TokenId};
use crate::error::{Error, Result};
use crate::kv_memory::KeyStats;
use crate::model::{argmax, Intervention, KeyVector, Model};
use crate::numerics::{Cholesky, Matrix};
use crate::tensorfile::{NamedTensor, TensorFile};

/// Ridge added to `λC₀ + K_e K_eᵀ`, relative to its trace.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// One prompt whose next token should become `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub fact: FactTriple,
    pub template: usize,
    pub prompt: Vec<TokenId>,
    pub target: TokenId,
    pub key: Option<KeyVector>,
    /// Replacement MLP output at the top edited layer.
    pub value: Option<Vec<f64>>,
}

impl EditRequest {
    pub fn new(model: &Model, fact: &FactTriple, template: usize, target: TokenId) -> Result<Self> {
        let prompt = render(fact, template, RenderMode::Prompt, &model.vocab)?;
        if target >= model.vocab_size() {
            return Err(Error::TokenOutOfRange { id: target, vocab: model.vocab_size() });
        }
        Ok(Self { fact: fact.clone(), template, prompt, target, key: None, value: None })
    }

    /// One request per training template of each fact, all aimed at EOS.
    pub fn eos_requests(model: &Model, facts: &[FactTriple]) -> Result<Vec<Self>> {
        let eos = model.vocab.eos();
        let mut out = Vec::new();
        for f in facts {
            for &t in &f.template_ids {
                out.push(Self::new(model, f, t, eos)?);
            }
        }
        Ok(out)
    }
}

/// An additive update to one layer's `W_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaMatrix {
    pub layer: usize,
    /// `d_model × d_mlp`
    pub values: Matrix,
}

impl DeltaMatrix {
    pub fn zeros(model: &Model, layer: usize) -> Self {
        Self { layer, values: Matrix::zeros(model.config.d_model, model.config.d_mlp) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetOptions {
    pub steps: usize,
    /// Per-coordinate step of the adaptive update.
    pub lr: f64,
    /// Multiplicative step decay per iteration.
    pub decay: f64,
    /// Weight of `‖v − v₀‖²`.
    pub penalty: f64,
    /// Stop once the target is the argmax with at least this probability.
    pub min_prob: f64,
}

impl Default for TargetOptions {
    fn default() -> Self {
        Self { steps: 25, lr: 0.5, decay: 0.95, penalty: 0.0625, min_prob: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetValue {
    pub value: Vec<f64>,
    /// False when the step budget ran out before `target` became the argmax.
    pub reached: bool,
    pub iterations: usize,
}

/// Finds an MLP output for `layer` at the last prompt position that makes
/// `target` the greedy next token.
///
/// Starts from the current output and minimizes
/// `−log p(target) + penalty·‖v − v₀‖²` with Adam-style steps, stopping as
/// soon as `target` is the argmax (with probability at least `min_prob`).
/// On budget exhaustion the best iterate (lowest loss) is returned.
pub fn solve_target_value(model: &Model, prompt: &[TokenId], layer: usize, target: TokenId, opts: &TargetOptions) -> Result<TargetValue> {
    model.check_tokens(prompt)?;
    if target >= model.vocab_size() {
        return Err(Error::TokenOutOfRange { id: target, vocab: model.vocab_size() });
    }
    let v0 = model.mlp_output(prompt, layer)?;
    let mut tokens = prompt.to_vec();
    tokens.push(target);
    let mut weights = vec![0.0; prompt.len()];
    *weights.last_mut().unwrap() = 1.0;
    let position = prompt.len() - 1;

    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; v0.len()];
    let mut s = vec![0.0; v0.len()];
    let mut v = v0.clone();
    let mut best = (f64::INFINITY, v0.clone(), false);
    let mut lr = opts.lr;
    for it in 0..=opts.steps {
        let iv = Intervention { layer, position, value: v.clone() };
        let (ce, grad, logits) = crate::model::intervention_grad(model, &tokens, &iv, &weights)?;
        let pen: f64 = v.iter().zip(&v0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * opts.penalty;
        let on_top = argmax(logits.row(position)) == target;
        if on_top && (-ce).exp() >= opts.min_prob {
            return Ok(TargetValue { value: v, reached: true, iterations: it });
        }
        if ce + pen < best.0 {
            best = (ce + pen, v.clone(), on_top);
        }
        if it == opts.steps {
            break;
        }
        let t = (it + 1) as i32;
        for i in 0..v.len() {
            let g = grad[i] + 2.0 * opts.penalty * (v[i] - v0[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            s[i] = b2 * s[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / (1.0 - b1.powi(t));
            let shat = s[i] / (1.0 - b2.powi(t));
            v[i] -= lr * mhat / (shat.sqrt() + eps);
        }
        lr *= opts.decay;
    }
    Ok(TargetValue { value: best.1, reached: best.2, iterations: opts.steps })
}

/// Fills `value` (and `key`) of every request at `layer`; returns how many reached their target.
pub fn solve_values(model: &Model, requests: &mut [EditRequest], layer: usize, opts: &TargetOptions) -> Result<usize> {
    let mut reached = 0;
    for r in requests.iter_mut() {
        let t = solve_target_value(model, &r.prompt, layer, r.target, opts)?;
        reached += t.reached as usize;
        r.value = Some(t.value);
        r.key = Some(model.extract_key(&r.prompt, layer)?);
    }
    Ok(reached)
}

/// Keys of the prompts at `layer`, one column each (`d_mlp × u`).
pub fn key_matrix(model: &Model, prompts: &[&[TokenId]], layer: usize) -> Result<Matrix> {
    let cols = prompts
        .iter()
        .map(|p| Ok(model.extract_key(p, layer)?.values))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_columns(model.config.d_mlp, &cols))
}

/// `R K_eᵀ (λC₀ + K_e K_eᵀ + ridge·I)⁻¹` with `ridge = ridge_scale · tr(λC₀ + K_e K_eᵀ)`.
pub fn delta_from_residual(stats: &KeyStats, keys: &Matrix, residual: &Matrix, ridge_scale: f64) -> Result<Matrix> {
    let d = stats.dim();
    if keys.rows() != d || keys.cols() != residual.cols() {
        return Err(Error::ShapeMismatch(format!(
            "keys {:?} and residual {:?} do not match key dimension {d}",
            keys.shape(),
            residual.shape()
        )));
    }
    if keys.cols() == 0 {
        return Ok(Matrix::zeros(residual.rows(), d));
    }
    let mut a = stats.scaled();
    a.axpy(1.0, &keys.gram());
    let ridge = ridge_scale * a.trace();
    a.add_diag(ridge);
    let chol = Cholesky::factor(&a)?;
    // Δᵀ = A⁻¹ K_e Rᵀ, since A is symmetric.
    let rhs = keys.matmul_t(residual);
    let delta = chol.solve(&rhs).transpose();
    if !delta.is_finite() {
        return Err(Error::NonFinite("closed-form delta".into()));
    }
    Ok(delta)
}

/// The closed-form update for one layer.
pub fn closed_form_delta(w0: &Matrix, stats: &KeyStats, keys: &Matrix, values: &Matrix, ridge_scale: f64) -> Result<Matrix> {
    if values.rows() != w0.rows() || keys.rows() != w0.cols() || values.cols() != keys.cols() {
        return Err(Error::ShapeMismatch(format!(
            "W0 {:?}, K_e {:?}, V_e {:?}",
            w0.shape(),
            keys.shape(),
            values.shape()
        )));
    }
    let residual = values.sub(&w0.matmul(keys));
    delta_from_residual(stats, keys, &residual, ridge_scale)
}

/// Stats for `layer`, or an error naming the missing layer.
pub fn stats_for(stats: &[KeyStats], layer: usize) -> Result<&KeyStats> {
    stats
        .iter()
        .find(|s| s.layer == layer)
        .ok_or_else(|| Error::Config(format!("no key statistics for layer {layer}")))
}

/// Residual `V_e − W_out K_e` at the top layer, one column per request.
pub fn top_residual(model: &Model, requests: &[EditRequest], top: usize) -> Result<Matrix> {
    let d = model.config.d_model;
    let mut cols = Vec::with_capacity(requests.len());
    for r in requests {
        let v = r.value.as_ref().ok_or_else(|| Error::Config("edit request without a target value".into()))?;
        if v.len() != d {
            return Err(Error::ShapeMismatch(format!("value of length {} for d_model {d}", v.len())));
        }
        let current = model.mlp_output(&r.prompt, top)?;
        cols.push(v.iter().zip(current).map(|(a, b)| a - b).collect());
    }
    Ok(Matrix::from_columns(d, &cols))
}

/// Validates an ascending, contiguous layer range inside the model.
pub fn check_layers(model: &Model, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("empty layer range".into()));
    }
    if layers.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Config(format!("layers {layers:?} must be ascending and contiguous")));
    }
    if *layers.last().unwrap() >= model.config.n_layers {
        return Err(Error::Config(format!("layer range {layers:?} exceeds {} layers", model.config.n_layers)));
    }
    Ok(())
}

/// Applies the spread edit in place, lowest layer first, and returns the deltas.
///
/// Every request must already carry its value for the top layer of `layers`.
pub fn spread_edit(model: &mut Model, requests: &[EditRequest], layers: &[usize], stats: &[KeyStats], ridge_scale: f64) -> Result<Vec<DeltaMatrix>> {
    check_layers(model, layers)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let top = *layers.last().unwrap();
    let residual = top_residual(model, requests, top)?;
    let prompts: Vec<&[TokenId]> = requests.iter().map(|r| r.prompt.as_slice()).collect();
    let mut deltas = Vec::with_capacity(layers.len());
    for &l in layers {
        let keys = key_matrix(model, &prompts, l)?;
        let share = residual.scale(1.0 / (top - l + 1) as f64);
        let delta = delta_from_residual(stats_for(stats, l)?, &keys, &share, ridge_scale)?;
        model.add_to_w_out(l, &delta)?;
        deltas.push(DeltaMatrix { layer: l, values: delta });
    }
    Ok(deltas)
}

/// What an edit touched, for the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditManifest {
    /// `(subject, relation, template)` per request.
    pub requests: Vec<(String, String, usize)>,
    pub layers: Vec<usize>,
    pub lambda: f64,
    pub ridge_scale: f64,
    pub targets_reached: usize,
    pub seeds: Vec<u64>,
}

pub fn save_deltas(deltas: &[DeltaMatrix], meta: serde_json::Value, path: &Path) -> Result<String> {
    let mut file = TensorFile::new(serde_json::json!({ "kind": "deltas", "meta": meta }));
    for d in deltas {
        let m = &d.values;
        file.push(NamedTensor::new(format!("layers.{}.delta", d.layer), vec![m.rows(), m.cols()], m.data().to_vec()));
    }
    file.save(path)
}

pub fn load_deltas(path: &Path) -> Result<Vec<DeltaMatrix>> {
    let file = TensorFile::load(path)?;
    if file.meta.get("kind").and_then(|k| k.as_str()) != Some("deltas") {
        return Err(Error::Format(format!("{} does not hold deltas", path.display())));
    }
    file.tensors
        .iter()
        .map(|t| {
            let layer = t
                .name
                .strip_prefix("layers.")
                .and_then(|s| s.strip_suffix(".delta"))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("unexpected tensor {:?}", t.name)))?;
            let [r, c] = t.shape[..] else {
                return Err(Error::Format("delta must be two-dimensional".into()));
            };
            Ok(DeltaMatrix { layer, values: Matrix::from_vec(r, c, t.data.clone())? })
        })
        .collect()
}
