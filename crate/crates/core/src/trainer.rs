//! Gradient training: pretraining on the corpus mixture and the two
//! fine-tuning baselines (EOS targets, reverse loss on the object).
//!
//! The optimizer is AdamW with decoupled weight decay on matrices, a linear
//! warmup into cosine decay, and global-norm gradient clipping. Everything
//! runs on one thread in a seed-determined order, so a run is bit-reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render, CorpusBundle, FactTriple, RenderMode, TokenId};
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, Model, ModelConfig, Params};

/// Sampling weights of the three pretraining sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub facts: f64,
    pub reasoning: f64,
    pub filler: f64,
}

impl Default for Mixture {
    fn default() -> Self {
        Self { facts: 0.3, reasoning: 0.5, filler: 0.2 }
    }
}

impl Mixture {
    fn weights(&self) -> [f64; 3] {
        [self.facts, self.reasoning, self.filler]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture used by [`pretrain`]; fine-tuning keeps the model's own.
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mixture: Mixture,
    pub seed: u64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent warming up linearly.
    pub warmup_fraction: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 3e-3,
            epochs: 30,
            batch_size: 16,
            mixture: Mixture::default(),
            seed: 0,
            clip_norm: 1.0,
            weight_decay: 0.01,
            warmup_fraction: 0.02,
            min_lr_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    /// Defaults for the fine-tuning baselines: one epoch at a small rate.
    pub fn finetune() -> Self {
        Self { lr: 1e-3, epochs: 1, batch_size: 4, warmup_fraction: 0.0, min_lr_fraction: 1.0, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        let w = self.mixture.weights();
        if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights must be non-negative and sum to 1, got {w:?}"));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("clip norm must be positive and weight decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad("warmup and floor fractions must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).round() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        let floor = self.min_lr_fraction;
        self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

/// A token sequence with a loss weight per predicted position.
#[derive(Clone, Debug)]
struct Example {
    tokens: Vec<TokenId>,
    weights: Vec<f64>,
}

impl Example {
    fn plain(tokens: Vec<TokenId>) -> Self {
        let weights = vec![1.0; tokens.len().saturating_sub(1)];
        Self { tokens, weights }
    }
}

struct AdamW {
    m: Params,
    v: Params,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &Params) -> Self {
        let mut zero = params.clone();
        zero.scale(0.0);
        // Norm gains, biases and embeddings are not decayed.
        let decay = params
            .tensors()
            .iter()
            .map(|(name, m)| m.rows() > 1 && !name.contains("emb"))
            .collect();
        Self { m: zero.clone(), v: zero, decay, t: 0 }
    }

    fn step(&mut self, params: &mut Params, grad: &Params, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, (_, g)), m), v), &decay) in
            params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs).zip(&self.decay)
        {
            let wd = if decay { weight_decay } else { 0.0 };
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                p[i] -= lr * (update + wd * p[i]);
            }
        }
    }
}

/// Runs `epochs` passes; `plan` yields the example order of each epoch.
fn run(
    model: &mut Model,
    config: &TrainConfig,
    steps_per_epoch: usize,
    mut plan: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<Example>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a);
    let mut opt = AdamW::new(&model.params);
    let total = steps_per_epoch * config.epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let examples = plan(epoch, &mut rng);
        let (mut epoch_loss, mut epoch_weight) = (0.0, 0.0);
        for batch in examples.chunks(config.batch_size) {
            let weight: f64 = batch.iter().flat_map(|e| e.weights.iter()).map(|w| w.abs()).sum();
            if weight == 0.0 {
                continue;
            }
            let mut grad: Option<Params> = None;
            let mut loss = 0.0;
            for ex in batch {
                let (l, g) = loss_and_grad(model, &ex.tokens, &ex.weights)?;
                loss += l;
                match grad.as_mut() {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => grad = Some(g),
                }
            }
            let mut grad = grad.expect("non-empty batch");
            grad.scale(1.0 / weight);
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let norm = grad.sq_norm().sqrt();
            if norm > config.clip_norm {
                grad.scale(config.clip_norm / norm);
            }
            opt.step(&mut model.params, &grad, config.lr_at(step, total), config.weight_decay);
            if !model.params.is_finite() {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
            epoch_loss += loss;
            epoch_weight += weight;
            step += 1;
        }
        let mean = if epoch_weight > 0.0 { epoch_loss / epoch_weight } else { 0.0 };
        log.push(EpochMetrics { epoch, split: "train".into(), loss: mean });
    }
    Ok(log)
}

/// Trains a model initialized from `config.seed` on the corpus mixture.
///
/// An epoch covers every fact sentence once in expectation: it holds
/// `|fact sentences| / w_facts` examples, each drawn from a source chosen by
/// the mixture weights and taken in shuffled order from that source. Weights
/// are rounded to `f32` at the end so the returned model equals its checkpoint.
pub fn pretrain(corpus: &CorpusBundle, config: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    config.validate()?;
    config.model.validate()?;
    let seqs = corpus.training_sequences()?;
    let sources = [seqs.facts, seqs.reasoning, seqs.filler];
    let weights = config.mixture.weights();
    let live: Vec<usize> = (0..3).filter(|&i| weights[i] > 0.0 && !sources[i].is_empty()).collect();
    if live.is_empty() {
        return Err(Error::InsufficientData("no training sequences under the mixture".into()));
    }
    let anchor = live[0];
    let epoch_len = (sources[anchor].len() as f64 / weights[anchor]).ceil() as usize;
    let total_w: f64 = live.iter().map(|&i| weights[i]).sum();

    let mut model = Model::new(config.model, corpus.vocab.clone(), config.seed)?;
    let mut orders: Vec<Vec<usize>> = sources.iter().map(|s| (0..s.len()).collect()).collect();
    let mut cursors = [0usize; 3];
    let plan = |_epoch: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(epoch_len);
        for _ in 0..epoch_len {
            let mut r = rng.random::<f64>() * total_w;
            let mut src = *live.last().unwrap();
            for &i in &live {
                if r < weights[i] {
                    src = i;
                    break;
                }
                r -= weights[i];
            }
            if cursors[src] == 0 {
                orders[src].shuffle(rng);
            }
            let idx = orders[src][cursors[src]];
            cursors[src] = (cursors[src] + 1) % orders[src].len();
            out.push(Example::plain(sources[src][idx].clone()));
        }
        out
    };
    let steps = epoch_len.div_ceil(config.batch_size);
    let log = run(&mut model, config, steps, plan)?;
    model.round_to_f32();
    Ok((model, log))
}

fn finetune(model: &Model, examples: Vec<Example>, config: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut out = model.clone();
    if config.epochs == 0 || examples.is_empty() {
        return Ok((out, Vec::new()));
    }
    let steps = examples.len().div_ceil(config.batch_size);
    let log = run(&mut out, config, steps, |_, rng| {
        let mut ex = examples.clone();
        ex.shuffle(rng);
        ex
    })?;
    out.round_to_f32();
    Ok((out, log))
}

/// FT baseline: next-token training on the facts rendered with EOS in place
/// of the object, on every training template. Returns a new model.
pub fn finetune_eos(model: &Model, facts: &[FactTriple], config: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut examples = Vec::new();
    for f in facts {
        for &t in &f.template_ids {
            examples.push(Example::plain(render(f, t, RenderMode::EosFull, &model.vocab)?));
        }
    }
    finetune(model, examples, config)
}

/// FT-UL baseline: gradient ascent on the next-token loss of the object
/// token only. Logged losses are the negated (minimized) objective.
pub fn finetune_reverse(model: &Model, facts: &[FactTriple], config: &TrainConfig) -> Result<(Model, Vec<EpochMetrics>)> {
    let mut examples = Vec::new();
    for f in facts {
        for &t in &f.template_ids {
            let tokens = render(f, t, RenderMode::Full, &model.vocab)?;
            let mut weights = vec![0.0; tokens.len() - 1];
            *weights.last_mut().unwrap() = -1.0;
            examples.push(Example { tokens, weights });
        }
    }
    finetune(model, examples, config)
}

/// Mean unweighted next-token loss of the object position over the facts.
pub fn object_loss(model: &Model, facts: &[FactTriple]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for f in facts {
        for &t in &f.template_ids {
            let tokens = render(f, t, RenderMode::Full, &model.vocab)?;
            let logits = model.forward_logits(&tokens)?;
            let last = tokens.len() - 1;
            total -= crate::model::log_softmax_at(logits.row(last - 1), tokens[last]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("no facts".into()));
    }
    Ok(total / n as f64)
}
