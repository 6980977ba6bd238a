//! Knowledge washing: push the keys of unwanted facts as far as possible
//! through `W_out` while bounding the disturbance on generic keys.
//!
//! Per layer the washer solves
//!
//! ```text
//! max_Δ ‖Δ K_w‖²   s.t.   tr(Δ λC₀ Δᵀ) / tr(λC₀) ≤ β
//! ```
//!
//! The objective and constraint are both quadratic, so the optimum is
//! `β · tr(λC₀) · λ_max` where `λ_max` is the top eigenvalue of the pencil
//! `(K_w K_wᵀ, λC₀ + εI)`, attained by a rank-one `Δ`. The optimizer
//! ascends in the `λC₀` metric and restores feasibility by rescaling along
//! the ray through the current iterate, which lands exactly on the boundary
//! because the constraint is homogeneous.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FactTriple, TokenId};
use crate::editor::{self, EditRequest, TargetOptions};
use crate::error::{Error, Result};
use crate::eval::{continuation, normalize};
use crate::kv_memory::{delta_k_normsq, key_total_normsq, KeyStats};
use crate::model::Model;
use crate::numerics::{frobenius_sq, top_generalized_eigenpair, Cholesky, Matrix, SymmetricPsd};

/// Scale of the random initializer, `0.001 · N(0, 1)` per entry.
pub const RANDOM_INIT_SCALE: f64 = 1e-3;
/// `ε = EPS_SCALE · tr(λC₀)` regularizes the constraint metric.
pub const EPS_SCALE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BetaPolicy {
    /// `β = m · β₀`, with `β₀` measured on this layer's initializer.
    Relative(f64),
    Constant(f64),
}

impl Default for BetaPolicy {
    fn default() -> Self {
        BetaPolicy::Relative(1.1)
    }
}

impl FromStr for BetaPolicy {
    type Err = Error;

    /// Parses `rel:<m>` or `const:<v>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("beta policy {s:?} is not rel:<m> or const:<v>"));
        let (kind, v) = s.split_once(':').ok_or_else(bad)?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        let p = match kind {
            "rel" => BetaPolicy::Relative(v),
            "const" => BetaPolicy::Constant(v),
            _ => return Err(bad()),
        };
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for BetaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaPolicy::Relative(m) => write!(f, "rel:{m}"),
            BetaPolicy::Constant(v) => write!(f, "const:{v}"),
        }
    }
}

impl BetaPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BetaPolicy::Relative(m) if m > 1.0 && m.is_finite() => Ok(()),
            BetaPolicy::Constant(v) if v > 0.0 && v <= 1.0 => Ok(()),
            _ => Err(Error::Config(format!("invalid beta policy {self}: need rel:m with m > 1 or const:v with 0 < v ≤ 1"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// The closed-form EOS edit for this layer.
    #[default]
    Memit,
    /// Small Gaussian noise.
    Random,
}

impl FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memit" => Ok(InitMode::Memit),
            "random" => Ok(InitMode::Random),
            _ => Err(Error::Config(format!("init mode {s:?} is not memit or random"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "gamma")]
pub enum Objective {
    /// Bounded-disturbance maximization (the default).
    #[default]
    Constrained,
    /// `min ‖ΔK‖² − γ‖ΔK_w‖²`.
    Gamma(f64),
}

impl FromStr for Objective {
    type Err = Error;

    /// Parses `constrained` or `gamma:<v>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "constrained" {
            return Ok(Objective::Constrained);
        }
        let g = s
            .strip_prefix("gamma:")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|g| *g >= 0.0 && g.is_finite())
            .ok_or_else(|| Error::Config(format!("objective {s:?} is not constrained or gamma:<v ≥ 0>")))?;
        Ok(Objective::Gamma(g))
    }
}

/// Settings of the inner optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AscentOptions {
    pub max_iters: usize,
    /// Step relative to the current objective/constraint ratio.
    pub step_size: f64,
    /// Stop when the objective improved by less than this fraction over `patience` iterations.
    pub tolerance: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self { max_iters: 500, step_size: 1.0, tolerance: 1e-6, patience: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WashConfig {
    /// Ascending, contiguous layers; the top one is where EOS targets are solved.
    pub layers: Vec<usize>,
    pub beta: BetaPolicy,
    pub successive_elimination: bool,
    pub init: InitMode,
    pub objective: Objective,
    pub ascent: AscentOptions,
    pub target: TargetOptions,
    pub ridge_scale: f64,
    pub seed: u64,
}

impl Default for WashConfig {
    fn default() -> Self {
        Self {
            layers: vec![1, 2],
            beta: BetaPolicy::default(),
            successive_elimination: true,
            init: InitMode::default(),
            objective: Objective::default(),
            ascent: AscentOptions::default(),
            target: TargetOptions::default(),
            ridge_scale: editor::DEFAULT_RIDGE,
            seed: 0,
        }
    }
}

impl WashConfig {
    pub fn validate(&self) -> Result<()> {
        self.beta.validate()?;
        if let Objective::Gamma(g) = self.objective {
            if !(g >= 0.0) {
                return Err(Error::Config(format!("gamma must be non-negative, got {g}")));
            }
        }
        if self.ascent.max_iters == 0 || !(self.ascent.step_size > 0.0) || self.ascent.patience == 0 {
            return Err(Error::Config("ascent needs max_iters, step_size and patience above zero".into()));
        }
        Ok(())
    }
}

/// `‖Δ K_w‖²`.
pub fn objective(delta: &Matrix, k_w: &Matrix) -> f64 {
    frobenius_sq(&delta.matmul(k_w))
}

/// `∂‖Δ K_w‖²/∂Δ = 2 Δ K_w K_wᵀ`.
pub fn objective_grad(delta: &Matrix, k_w: &Matrix) -> Matrix {
    delta.matmul(&k_w.gram()).scale(2.0)
}

/// `∂ tr(Δ λC₀ Δᵀ)/∂Δ = 2 Δ λC₀`.
pub fn constraint_grad(delta: &Matrix, stats: &KeyStats) -> Matrix {
    delta.matmul(&stats.scaled()).scale(2.0)
}

/// `‖Δ K‖² / ‖K‖²` under the `λC₀` surrogate.
pub fn constraint_ratio(delta: &Matrix, stats: &KeyStats) -> Result<f64> {
    Ok(delta_k_normsq(delta, stats)? / key_total_normsq(stats))
}

/// `β₀ = ‖Δ₀K‖² / ‖K‖²`.
pub fn compute_beta0(delta0: &Matrix, stats: &KeyStats) -> Result<f64> {
    constraint_ratio(delta0, stats)
}

fn regularized_metric(stats: &KeyStats) -> Matrix {
    let mut b = stats.scaled();
    b.add_diag(EPS_SCALE * key_total_normsq(stats));
    b
}

fn random_delta(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        RANDOM_INIT_SCALE * z
    }).collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).expect("finite noise")
}

/// Upper bound on the objective of any feasible `Δ`, with the maximizing key direction.
pub fn oracle_optimum(k_w: &Matrix, stats: &KeyStats, beta: f64, eps: f64) -> Result<(f64, Vec<f64>)> {
    if k_w.rows() != stats.dim() {
        return Err(Error::ShapeMismatch(format!("K_w has {} rows, keys have dimension {}", k_w.rows(), stats.dim())));
    }
    let a = SymmetricPsd::new(k_w.gram())?;
    let b = SymmetricPsd::new(stats.scaled())?;
    let (lambda_max, v) = top_generalized_eigenpair(&a, &b, eps)?;
    Ok((beta * key_total_normsq(stats) * lambda_max, v))
}

/// Default `ε` for [`oracle_optimum`].
pub fn default_eps(stats: &KeyStats) -> f64 {
    EPS_SCALE * key_total_normsq(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimized {
    pub delta: Matrix,
    pub objective: f64,
    /// Objective of the initializer after rescaling onto the boundary.
    pub initial_objective: f64,
    pub constraint_ratio: f64,
    pub iterations: usize,
    /// Set when the ascent gained less than the tolerance over the initializer.
    pub not_improved: bool,
}

/// Maximizes `‖ΔK_w‖²` subject to the `β` constraint, starting from `delta0`.
///
/// A zero initializer is replaced by seeded noise. With no wash keys the
/// zero delta is returned.
pub fn optimize_delta(delta0: &Matrix, k_w: &Matrix, stats: &KeyStats, beta: f64, opts: &AscentOptions) -> Result<Optimized> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if delta0.cols() != stats.dim() || k_w.rows() != stats.dim() {
        return Err(Error::ShapeMismatch(format!(
            "delta {:?}, K_w {:?}, key dimension {}",
            delta0.shape(),
            k_w.shape(),
            stats.dim()
        )));
    }
    let zero = |delta: Matrix| Optimized {
        delta,
        objective: 0.0,
        initial_objective: 0.0,
        constraint_ratio: 0.0,
        iterations: 0,
        not_improved: true,
    };
    if k_w.cols() == 0 {
        return Ok(zero(Matrix::zeros(delta0.rows(), delta0.cols())));
    }

    let b = regularized_metric(stats);
    let chol = Cholesky::factor(&b)?;
    let budget = beta * key_total_normsq(stats);
    let a = k_w.gram();
    let metric = |d: &Matrix| d.matmul(&b).dot(d);
    let onto_boundary = |d: Matrix| {
        let c = metric(&d);
        if c > 0.0 {
            d.scale((budget / c).sqrt())
        } else {
            d
        }
    };

    let start = if delta0.max_abs() == 0.0 { random_delta(delta0.rows(), delta0.cols(), opts.seed) } else { delta0.clone() };
    let mut delta = onto_boundary(start);
    let mut obj = objective(&delta, k_w);
    let initial = obj;
    let mut history = vec![obj];
    let mut step = opts.step_size;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        // Ascent direction in the metric of `B`: (Δ A) B⁻¹, scaled by the
        // current Rayleigh quotient so the step is dimensionless.
        let rayleigh = obj / metric(&delta);
        if !(rayleigh > 0.0) {
            break;
        }
        let dir = chol.solve_right(&delta.matmul(&a));
        let mut accepted = false;
        while step > 1e-12 {
            let mut cand = delta.clone();
            cand.axpy(step / rayleigh, &dir);
            let cand = onto_boundary(cand);
            let cand_obj = objective(&cand, k_w);
            if cand_obj >= obj {
                delta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(obj);
        if history.len() > opts.patience {
            let past = history[history.len() - 1 - opts.patience];
            if (obj - past) <= opts.tolerance * obj.abs() {
                break;
            }
        }
    }
    let ratio = constraint_ratio(&delta, stats)?;
    let not_improved = obj - initial < opts.tolerance * initial.abs().max(f64::MIN_POSITIVE);
    Ok(Optimized { delta, objective: obj, initial_objective: initial, constraint_ratio: ratio, iterations, not_improved })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaOutcome {
    pub delta: Matrix,
    /// Final `tr(Δ λC₀ Δᵀ) − γ‖ΔK_w‖²`.
    pub objective: f64,
    pub iterations: usize,
    /// The objective was driven below zero, so it is unbounded below.
    pub diverged: bool,
}

/// Norm at which a diverging run is cut short.
const GAMMA_BLOWUP: f64 = 1e12;

/// Preconditioned descent on `tr(Δ λC₀ Δᵀ) − γ‖ΔK_w‖²` from seeded noise.
///
/// The objective is bounded below (by 0, at `Δ = 0`) exactly when
/// `γ λ_max ≤ 1`; above that it has a descent ray and the run reports divergence.
pub fn wash_delta_gamma(d_model: usize, k_w: &Matrix, stats: &KeyStats, gamma: f64, opts: &AscentOptions) -> Result<GammaOutcome> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    if k_w.rows() != stats.dim() {
        return Err(Error::ShapeMismatch(format!("K_w has {} rows, keys have dimension {}", k_w.rows(), stats.dim())));
    }
    let b = regularized_metric(stats);
    let chol = Cholesky::factor(&b)?;
    let a = k_w.gram();
    let c = stats.scaled();
    let value = |d: &Matrix| d.matmul(&c).dot(d) - gamma * d.matmul(&a).dot(d);
    let mut delta = random_delta(d_model, stats.dim(), opts.seed);
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        // Δ ← Δ − s (Δ(λC₀ − γA)) B⁻¹; with s = 1 this is Δ ← γ Δ A B⁻¹ up to ε.
        let mut g = delta.matmul(&c);
        g.axpy(-gamma, &delta.matmul(&a));
        delta.axpy(-opts.step_size, &chol.solve_right(&g));
        if frobenius_sq(&delta).sqrt() > GAMMA_BLOWUP || !delta.is_finite() {
            break;
        }
    }
    let objective = value(&delta);
    Ok(GammaOutcome { diverged: objective < 0.0 || !objective.is_finite(), delta, objective, iterations })
}

/// One line of the washing trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WashTraceRecord {
    pub layer: usize,
    pub active_facts: usize,
    pub active_prompts: usize,
    pub beta: f64,
    pub beta0: f64,
    pub objective: f64,
    pub constraint_ratio: f64,
    pub iterations: usize,
    pub not_improved: bool,
    pub diverged: bool,
    pub skipped: bool,
}

pub type WashTrace = Vec<WashTraceRecord>;

/// True when the continuation of `prompt` still contains `object`.
fn still_answers(model: &Model, prompt: &[TokenId], object: &str) -> Result<bool> {
    let text = model.vocab.decode_string(&continuation(model, prompt)?)?;
    let gold = normalize(object);
    let words = normalize(&text);
    Ok(!gold.is_empty() && words.windows(gold.len()).any(|w| w == gold.as_slice()))
}

/// Washes `facts` out of the configured layers, lowest first. Returns a new
/// model, the applied deltas and the per-layer trace.
///
/// Edit requests are the facts' training-template prompts aimed at EOS. Their
/// target values are solved once at the top layer on the input model, which
/// fixes the residual `R`; layer `l` takes `R / (top − l + 1)` for the active
/// prompts as its closed-form initializer `Δ₀`, and `β₀` is always measured
/// on that `Δ₀`, also when starting from noise. With successive elimination
/// a prompt stays active only while the current model still completes it
/// with the object.
pub fn successive_wash(
    model: &Model,
    facts: &[FactTriple],
    config: &WashConfig,
    stats: &[KeyStats],
) -> Result<(Model, Vec<editor::DeltaMatrix>, WashTrace)> {
    config.validate()?;
    editor::check_layers(model, &config.layers)?;
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(config.layers.len());
    let mut deltas = Vec::new();
    let top = *config.layers.last().unwrap();

    let mut requests = EditRequest::eos_requests(model, facts)?;
    let needs_memit = config.init == InitMode::Memit || matches!(config.beta, BetaPolicy::Relative(_));
    if needs_memit && !requests.is_empty() {
        editor::solve_values(model, &mut requests, top, &config.target)?;
    }
    let residual = if needs_memit && !requests.is_empty() { Some(editor::top_residual(model, &requests, top)?) } else { None };

    for &l in &config.layers {
        let layer_stats = editor::stats_for(stats, l)?;
        let mut active = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            if !config.successive_elimination || still_answers(&current, &r.prompt, &r.fact.object)? {
                active.push(i);
            }
        }
        let active_facts = {
            let mut keys: Vec<(&str, &str)> = active.iter().map(|&i| requests[i].fact.key()).collect();
            keys.sort_unstable();
            keys.dedup();
            keys.len()
        };
        let mut record = WashTraceRecord {
            layer: l,
            active_facts,
            active_prompts: active.len(),
            beta: 0.0,
            beta0: 0.0,
            objective: 0.0,
            constraint_ratio: 0.0,
            iterations: 0,
            not_improved: false,
            diverged: false,
            skipped: active.is_empty(),
        };
        if active.is_empty() {
            trace.push(record);
            continue;
        }
        let prompts: Vec<&[TokenId]> = active.iter().map(|&i| requests[i].prompt.as_slice()).collect();
        let k_w = editor::key_matrix(&current, &prompts, l)?;
        let memit_delta = match &residual {
            Some(r) => {
                let share = r.select_columns(&active).scale(1.0 / (top - l + 1) as f64);
                Some(editor::delta_from_residual(layer_stats, &k_w, &share, config.ridge_scale)?)
            }
            None => None,
        };
        let d_model = model.config.d_model;
        let layer_seed = config.seed ^ (l as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let delta0 = match config.init {
            InitMode::Memit => memit_delta.clone().expect("solved above"),
            InitMode::Random => random_delta(d_model, model.config.d_mlp, layer_seed),
        };
        let beta0 = match &memit_delta {
            Some(d) => compute_beta0(d, layer_stats)?,
            None => compute_beta0(&delta0, layer_stats)?,
        };
        let beta = match config.beta {
            BetaPolicy::Relative(m) => m * beta0,
            BetaPolicy::Constant(v) => v,
        };
        record.beta0 = beta0;
        record.beta = beta;

        let delta = match config.objective {
            Objective::Constrained => {
                if !(beta > 0.0) {
                    record.skipped = true;
                    trace.push(record);
                    continue;
                }
                let opts = AscentOptions { seed: layer_seed, ..config.ascent.clone() };
                let out = optimize_delta(&delta0, &k_w, layer_stats, beta, &opts)?;
                record.objective = out.objective;
                record.constraint_ratio = out.constraint_ratio;
                record.iterations = out.iterations;
                record.not_improved = out.not_improved;
                out.delta
            }
            Objective::Gamma(g) => {
                let opts = AscentOptions { seed: layer_seed, ..config.ascent.clone() };
                let out = wash_delta_gamma(d_model, &k_w, layer_stats, g, &opts)?;
                record.objective = objective(&out.delta, &k_w);
                record.constraint_ratio = constraint_ratio(&out.delta, layer_stats)?;
                record.iterations = out.iterations;
                record.diverged = out.diverged;
                out.delta
            }
        };
        current.add_to_w_out(l, &delta)?;
        deltas.push(editor::DeltaMatrix { layer: l, values: delta });
        trace.push(record);
    }
    Ok((current, deltas, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_identity(d: usize) -> KeyStats {
        KeyStats::new(0, SymmetricPsd::identity(d), 1, 1.0).unwrap()
    }

    #[test]
    fn beta0_identity_metric() {
        let s = stats_identity(4);
        let d = Matrix::from_rows(&[&[1.0, 0.0, 0.0, 1.0]]);
        assert!((compute_beta0(&d, &s).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(compute_beta0(&Matrix::zeros(1, 4), &s).unwrap(), 0.0);
    }

    #[test]
    fn oracle_single_unit_column() {
        let s = stats_identity(4);
        let k = Matrix::from_columns(4, &[vec![1.0, 0.0, 0.0, 0.0]]);
        let (bound, v) = oracle_optimum(&k, &s, 0.5, 0.0).unwrap();
        assert!((bound - 2.0).abs() < 1e-9);
        assert!((v[0].abs() - 1.0).abs() < 1e-9);
        let (zero, _) = oracle_optimum(&Matrix::zeros(4, 1), &s, 0.5, 0.0).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn empty_wash_keys_give_zero_delta() {
        let s = stats_identity(3);
        let out = optimize_delta(&Matrix::zeros(2, 3), &Matrix::zeros(3, 0), &s, 0.1, &AscentOptions::default()).unwrap();
        assert_eq!(out.delta.max_abs(), 0.0);
    }

    #[test]
    fn gamma_zero_returns_zero() {
        let s = stats_identity(3);
        let k = Matrix::from_columns(3, &[vec![1.0, 2.0, 0.0]]);
        let out = wash_delta_gamma(2, &k, &s, 0.0, &AscentOptions::default()).unwrap();
        assert!(out.delta.max_abs() < 1e-12);
        assert!(!out.diverged);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("rel:1.1".parse::<BetaPolicy>().unwrap(), BetaPolicy::Relative(1.1));
        assert_eq!("const:0.1".parse::<BetaPolicy>().unwrap(), BetaPolicy::Constant(0.1));
        assert!("rel:0.9".parse::<BetaPolicy>().is_err());
        assert!("const:2".parse::<BetaPolicy>().is_err());
        assert!("wat".parse::<BetaPolicy>().is_err());
        assert_eq!("gamma:0.5".parse::<Objective>().unwrap(), Objective::Gamma(0.5));
        assert!("gamma:-1".parse::<Objective>().is_err());
        assert_eq!("random".parse::<InitMode>().unwrap(), InitMode::Random);
    }
}
