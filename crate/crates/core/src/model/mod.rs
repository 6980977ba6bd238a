//! A small decoder-only transformer with parallel attention/MLP blocks.
//!
//! Each layer reads the incoming residual stream once, normalizes it, and
//! adds both branches back:
//!
//! ```text
//! n   = LN(h)
//! h'  = h + Attn(n) + W_out · gelu(W_in · n + b_in)
//! ```
//!
//! The vector `gelu(W_in · n + b_in)` at a position is that layer's *key*;
//! `W_out` maps keys to values. Editing and washing only ever touch `W_out`.

mod backprop;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use backprop::{loss_and_grad, Intervention, Trace};
pub(crate) use backprop::intervention_grad;
pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 4, d_model: 64, d_mlp: 256, n_heads: 2, context: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_mlp == 0 || self.context == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln_g: Matrix,
    pub ln_b: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `d_mlp × d_model`
    pub w_in: Matrix,
    pub b_in: Matrix,
    /// `d_model × d_mlp`
    pub w_out: Matrix,
}

/// All trainable tensors. Also used as the gradient and optimizer-state container.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    /// `vocab × d_model`
    pub head: Matrix,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig, vocab: usize) -> Self {
        let (d, m) = (cfg.d_model, cfg.d_mlp);
        let layer = LayerParams {
            ln_g: Matrix::zeros(1, d),
            ln_b: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            w_in: Matrix::zeros(m, d),
            b_in: Matrix::zeros(1, m),
            w_out: Matrix::zeros(d, m),
        };
        Self {
            tok_emb: Matrix::zeros(vocab, d),
            pos_emb: Matrix::zeros(cfg.context, d),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Matrix::zeros(1, d),
            lnf_b: Matrix::zeros(1, d),
            head: Matrix::zeros(vocab, d),
        }
    }

    /// GPT-2 style initialization: N(0, 0.02), residual projections shrunk by √(2L).
    pub fn init(cfg: &ModelConfig, vocab: usize, seed: u64) -> Self {
        let mut p = Self::zeros(cfg, vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut fill = |m: &mut Matrix, s: f64| {
            let normal = Normal::new(0.0, s).unwrap();
            m.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        };
        fill(&mut p.tok_emb, std);
        fill(&mut p.pos_emb, std);
        for l in &mut p.layers {
            l.ln_g.data_mut().fill(1.0);
            fill(&mut l.w_q, std);
            fill(&mut l.w_k, std);
            fill(&mut l.w_v, std);
            fill(&mut l.w_o, resid_std);
            fill(&mut l.w_in, std);
            fill(&mut l.w_out, resid_std);
        }
        p.lnf_g.data_mut().fill(1.0);
        fill(&mut p.head, std);
        p
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("ln_g", &l.ln_g),
                ("ln_b", &l.ln_b),
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("w_in", &l.w_in),
                ("b_in", &l.b_in),
                ("w_out", &l.w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable tensors, same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln_g,
                &mut l.ln_b,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.w_in,
                &mut l.b_in,
                &mut l.w_out,
            ]);
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.dot(m)).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|m| m.scale_in_place(s));
    }

    pub fn axpy(&mut self, s: f64, other: &Params) {
        let src = other.tensors();
        for (dst, (_, o)) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(s, o);
        }
    }
}

/// Weights plus vocabulary: everything needed to run the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Params,
}

/// MLP inner activation at one position of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyVector {
    pub values: Vec<f64>,
    pub layer: usize,
    /// FNV-1a hash of the prompt tokens.
    pub prompt_hash: u64,
}

pub fn prompt_hash(tokens: &[TokenId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &t in tokens {
        for b in (t as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, vocab.len(), seed);
        Ok(Self { config, vocab, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InsufficientData("empty token sequence".into()));
        }
        if tokens.len() > self.config.context {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens exceed the context of {}",
                tokens.len(),
                self.config.context
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::TokenOutOfRange { id, vocab: self.vocab.len() });
        }
        Ok(())
    }

    /// Per-position next-token logits, `T × |vocab|`.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Matrix> {
        Ok(self.trace(tokens, None)?.logits)
    }

    /// Full forward pass keeping every intermediate.
    pub fn trace(&self, tokens: &[TokenId], intervention: Option<&Intervention>) -> Result<Trace> {
        self.check_tokens(tokens)?;
        Ok(backprop::forward(self, tokens, intervention))
    }

    /// Greedy decoding of exactly `n` tokens. Long sequences keep the last `context` tokens.
    pub fn generate_greedy(&self, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        if n == 0 {
            return Err(Error::Config("generation length must be at least 1".into()));
        }
        self.check_tokens(&prompt[prompt.len().saturating_sub(self.config.context)..])?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let start = seq.len().saturating_sub(self.config.context);
            let logits = self.forward_logits(&seq[start..])?;
            let next = argmax(logits.row(logits.rows() - 1));
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// MLP key `gelu(W_in · LN(h) + b_in)` at the last prompt position of `layer`.
    pub fn extract_key(&self, prompt: &[TokenId], layer: usize) -> Result<KeyVector> {
        let keys = self.keys_at(prompt, layer)?;
        Ok(KeyVector {
            values: keys.row(keys.rows() - 1).to_vec(),
            layer,
            prompt_hash: prompt_hash(prompt),
        })
    }

    /// Keys at every position of `layer` (`T × d_mlp`).
    pub fn keys_at(&self, tokens: &[TokenId], layer: usize) -> Result<Matrix> {
        if layer >= self.config.n_layers {
            return Err(Error::Config(format!("layer {layer} out of range for {} layers", self.config.n_layers)));
        }
        self.check_tokens(tokens)?;
        Ok(backprop::forward_keys(self, tokens, layer))
    }

    /// MLP output (`W_out · key`) at the last position of `layer`.
    pub fn mlp_output(&self, prompt: &[TokenId], layer: usize) -> Result<Vec<f64>> {
        let key = self.extract_key(prompt, layer)?;
        Ok(self.w_out(layer)?.matvec(&key.values))
    }

    /// Mean next-token negative log-likelihood (nats) over every predicted token.
    pub fn log_perplexity(&self, texts: &[Vec<TokenId>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for text in texts {
            if text.len() < 2 {
                return Err(Error::InsufficientData("perplexity needs texts of two or more tokens".into()));
            }
            let logits = self.forward_logits(text)?;
            for t in 0..text.len() - 1 {
                total += -log_softmax_at(logits.row(t), text[t + 1]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::InsufficientData("no texts".into()));
        }
        Ok(total / count as f64)
    }

    pub fn w_out(&self, layer: usize) -> Result<&Matrix> {
        self.params
            .layers
            .get(layer)
            .map(|l| &l.w_out)
            .ok_or_else(|| Error::Config(format!("layer {layer} out of range")))
    }

    pub fn get_w_out(&self, layer: usize) -> Result<Matrix> {
        self.w_out(layer).cloned()
    }

    pub fn set_w_out(&mut self, layer: usize, w: Matrix) -> Result<()> {
        let expected = (self.config.d_model, self.config.d_mlp);
        if w.shape() != expected {
            return Err(Error::ShapeMismatch(format!("W_out must be {expected:?}, got {:?}", w.shape())));
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("W_out".into()));
        }
        let n = self.config.n_layers;
        let slot = self.params.layers.get_mut(layer).ok_or_else(|| Error::Config(format!("layer {layer} out of range for {n}")))?;
        slot.w_out = w;
        Ok(())
    }

    /// `W_out^layer += delta`.
    pub fn add_to_w_out(&mut self, layer: usize, delta: &Matrix) -> Result<()> {
        let w = self.w_out(layer)?;
        if w.shape() != delta.shape() {
            return Err(Error::ShapeMismatch(format!("delta {:?} vs W_out {:?}", delta.shape(), w.shape())));
        }
        let updated = w.add(delta);
        self.set_w_out(layer, updated)
    }

    /// Rounds every weight to the nearest `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for m in self.params.tensors_mut() {
            m.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `log softmax(row)[target]`, computed stably.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[target] - lse
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::EOS;

    pub(crate) fn tiny(seed: u64) -> Model {
        let vocab = Vocab::new([EOS, "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect()).unwrap();
        let cfg = ModelConfig { n_layers: 1, d_model: 4, d_mlp: 8, n_heads: 2, context: 8 };
        let mut m = Model::new(cfg, vocab, seed).unwrap();
        // Larger weights than the training init so the test signal is not tiny.
        m.params.scale(20.0);
        for l in &mut m.params.layers {
            l.ln_g.data_mut().fill(1.1);
        }
        m.params.lnf_g.data_mut().fill(0.9);
        m
    }

    #[test]
    fn shapes_and_determinism() {
        let m = tiny(1);
        let l = m.forward_logits(&[2]).unwrap();
        assert_eq!(l.shape(), (1, 5));
        assert_eq!(m.forward_logits(&[1, 2, 3]).unwrap(), m.forward_logits(&[1, 2, 3]).unwrap());
        assert!(matches!(m.forward_logits(&[7]), Err(Error::TokenOutOfRange { id: 7, .. })));
        assert!(m.forward_logits(&[]).is_err());
    }

    #[test]
    fn causality() {
        let m = tiny(2);
        let a = m.forward_logits(&[1, 2, 3, 4]).unwrap();
        let b = m.forward_logits(&[1, 2, 0, 0]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn greedy_generation() {
        let mut m = tiny(3);
        let out = m.generate_greedy(&[1, 2], 10).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out, m.generate_greedy(&[1, 2], 10).unwrap());
        // Force EOS to be the argmax through its head bias direction.
        let eos = m.vocab.eos();
        m.params.head.row_mut(eos).fill(0.0);
        m.params.lnf_g.data_mut().fill(0.0);
        m.params.lnf_b.data_mut().fill(1.0);
        m.params.head.row_mut(eos).fill(100.0);
        assert_eq!(m.generate_greedy(&[1, 2], 1).unwrap(), vec![eos]);
    }

    #[test]
    fn key_shape_and_locality() {
        let mut m = tiny(4);
        let k = m.extract_key(&[1, 2, 3], 0).unwrap();
        assert_eq!(k.values.len(), 8);
        let mut w = m.get_w_out(0).unwrap();
        w.data_mut().iter_mut().for_each(|x| *x += 0.5);
        m.set_w_out(0, w).unwrap();
        m.params.head.scale_in_place(3.0);
        assert_eq!(m.extract_key(&[1, 2, 3], 0).unwrap(), k);
    }

    #[test]
    fn w_out_roundtrip_and_inverse() {
        let mut m = tiny(5);
        let before = m.forward_logits(&[1, 3, 2]).unwrap();
        let w = m.get_w_out(0).unwrap();
        m.set_w_out(0, w.clone()).unwrap();
        assert_eq!(m.get_w_out(0).unwrap(), w);
        m.add_to_w_out(0, &Matrix::zeros(4, 8)).unwrap();
        assert_eq!(m.forward_logits(&[1, 3, 2]).unwrap(), before);
        let delta = Matrix::from_vec(4, 8, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        m.add_to_w_out(0, &delta).unwrap();
        assert_ne!(m.forward_logits(&[1, 3, 2]).unwrap(), before);
        m.add_to_w_out(0, &delta.scale(-1.0)).unwrap();
        let after = m.forward_logits(&[1, 3, 2]).unwrap();
        assert!(after.sub(&before).max_abs() <= 1e-9);
        assert!(matches!(m.set_w_out(0, Matrix::zeros(8, 4)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn uniform_logits_perplexity() {
        let vocab: Vec<String> = std::iter::once(EOS.to_string()).chain((1..16).map(|i| format!("t{i}"))).collect();
        let cfg = ModelConfig { n_layers: 1, d_model: 4, d_mlp: 8, n_heads: 1, context: 8 };
        let mut m = Model::new(cfg, Vocab::new(vocab).unwrap(), 0).unwrap();
        m.params.head.data_mut().fill(0.0);
        let texts = vec![vec![1, 2, 3], vec![4, 5]];
        let lp = m.log_perplexity(&texts).unwrap();
        assert!((lp - 16f64.ln()).abs() < 1e-12);
        let doubled: Vec<_> = texts.iter().chain(&texts).cloned().collect();
        assert_eq!(m.log_perplexity(&doubled).unwrap(), lp);
        assert!(m.log_perplexity(&[vec![1]]).is_err());
    }
}
