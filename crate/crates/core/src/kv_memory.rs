//! The key-value view of an MLP output projection.
//!
//! `W_out` maps keys (MLP inner activations) to values. Its behaviour on
//! "everything else" is summarized by the uncentered second moment of keys
//! over generic text, `C₀ = E[k kᵀ]`, scaled by `λ` to stand in for `K Kᵀ`.
//! With that surrogate, `‖ΔK‖² = tr(Δ λC₀ Δᵀ)` and `‖K‖² = tr(λC₀)`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{gemm, Matrix, SymmetricPsd};
use crate::tensorfile::{NamedTensor, TensorFile};

pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct KeyStats {
    pub layer: usize,
    /// `E[k kᵀ]` over the sampled positions (`d_mlp × d_mlp`).
    pub c0: SymmetricPsd,
    pub sample_count: usize,
    pub lambda: f64,
}

impl KeyStats {
    pub fn new(layer: usize, c0: SymmetricPsd, sample_count: usize, lambda: f64) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InsufficientData("key statistics need at least one sample".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self { layer, c0, sample_count, lambda })
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self> {
        Self::new(self.layer, self.c0, self.sample_count, lambda)
    }

    pub fn dim(&self) -> usize {
        self.c0.dim()
    }

    /// `λ C₀`, the stand-in for `K Kᵀ`.
    pub fn scaled(&self) -> Matrix {
        self.c0.matrix().scale(self.lambda)
    }
}

/// Every position of every text except the first.
fn eligible_positions(texts: &[Vec<TokenId>]) -> Vec<(usize, usize)> {
    texts
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (1..t.len()).map(move |p| (i, p)))
        .collect()
}

/// Estimates `C₀` at `layer` from `n_samples` distinct positions drawn with `seed`.
pub fn estimate_key_stats(
    model: &Model,
    texts: &[Vec<TokenId>],
    layer: usize,
    n_samples: usize,
    seed: u64,
    lambda: f64,
) -> Result<KeyStats> {
    let positions = eligible_positions(texts);
    if n_samples == 0 || positions.len() < n_samples {
        return Err(Error::InsufficientData(format!(
            "{n_samples} key samples requested but only {} positions are available",
            positions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, positions.len(), n_samples).into_vec();
    chosen.sort_unstable();
    let picked: Vec<(usize, usize)> = chosen.into_iter().map(|i| positions[i]).collect();
    key_stats_at(model, texts, &picked, layer, lambda)
}

/// `C₀` from keys at explicit `(text, position)` pairs.
pub fn key_stats_at(
    model: &Model,
    texts: &[Vec<TokenId>],
    positions: &[(usize, usize)],
    layer: usize,
    lambda: f64,
) -> Result<KeyStats> {
    let d = model.config.d_mlp;
    let mut stacked = Matrix::zeros(positions.len(), d);
    let mut row = 0;
    let mut i = 0;
    while i < positions.len() {
        let text = positions[i].0;
        let tokens = texts.get(text).ok_or_else(|| Error::InsufficientData(format!("no text {text}")))?;
        let keys = model.keys_at(&tokens[..tokens.len().min(model.config.context)], layer)?;
        while i < positions.len() && positions[i].0 == text {
            let p = positions[i].1;
            if p >= keys.rows() {
                return Err(Error::InsufficientData(format!("position {p} beyond text {text}")));
            }
            stacked.row_mut(row).copy_from_slice(keys.row(p));
            row += 1;
            i += 1;
        }
    }
    KeyStats::new(layer, second_moment(&stacked)?, positions.len(), lambda)
}

/// `(1/n) Σ kᵢ kᵢᵀ` for the rows `kᵢ` of `keys`.
pub fn second_moment(keys: &Matrix) -> Result<SymmetricPsd> {
    let n = keys.rows();
    if n == 0 {
        return Err(Error::InsufficientData("no keys".into()));
    }
    let d = keys.cols();
    let mut c = Matrix::zeros(d, d);
    gemm(1.0 / n as f64, keys, true, keys, false, 0.0, &mut c);
    SymmetricPsd::new(c)
}

fn check_shape(delta: &Matrix, stats: &KeyStats) -> Result<()> {
    if delta.cols() != stats.dim() {
        return Err(Error::ShapeMismatch(format!("delta has {} columns, keys have dimension {}", delta.cols(), stats.dim())));
    }
    Ok(())
}

/// `‖ΔK‖² ≈ tr(Δ λC₀ Δᵀ)`.
pub fn delta_k_normsq(delta: &Matrix, stats: &KeyStats) -> Result<f64> {
    check_shape(delta, stats)?;
    let dc = delta.matmul(stats.c0.matrix());
    Ok((stats.lambda * dc.dot(delta)).max(0.0))
}

/// `‖K‖² ≈ tr(λC₀)`.
pub fn key_total_normsq(stats: &KeyStats) -> f64 {
    stats.lambda * stats.c0.trace()
}

#[derive(Serialize, Deserialize)]
struct StatsMeta {
    layer: usize,
    sample_count: usize,
    lambda: f64,
}

/// Writes statistics for several layers into one container; returns the checksum.
pub fn save_key_stats(stats: &[KeyStats], path: &Path) -> Result<String> {
    let mut layers: Vec<usize> = stats.iter().map(|s| s.layer).collect();
    layers.sort_unstable();
    if layers.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate layers in key statistics: {layers:?}")));
    }
    let meta: Vec<StatsMeta> =
        stats.iter().map(|s| StatsMeta { layer: s.layer, sample_count: s.sample_count, lambda: s.lambda }).collect();
    let mut file = TensorFile::new(serde_json::json!({ "kind": "key_stats", "layers": meta }));
    for s in stats {
        let m = s.c0.matrix();
        file.push(NamedTensor::new(format!("layers.{}.c0", s.layer), vec![m.rows(), m.cols()], m.data().to_vec()));
    }
    file.save(path)
}

pub fn load_key_stats(path: &Path) -> Result<Vec<KeyStats>> {
    let file = TensorFile::load(path)?;
    if file.meta.get("kind").and_then(|k| k.as_str()) != Some("key_stats") {
        return Err(Error::Format(format!("{} does not hold key statistics", path.display())));
    }
    let meta: Vec<StatsMeta> = serde_json::from_value(file.meta["layers"].clone())?;
    meta.into_iter()
        .map(|m| {
            let t = file.get(&format!("layers.{}.c0", m.layer))?;
            let [r, c] = t.shape[..] else {
                return Err(Error::Format("c0 must be two-dimensional".into()));
            };
            let c0 = SymmetricPsd::new(Matrix::from_vec(r, c, t.data.clone())?)?;
            KeyStats::new(m.layer, c0, m.sample_count, m.lambda)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;

    fn texts() -> Vec<Vec<TokenId>> {
        vec![vec![1, 2, 3, 4], vec![0, 4, 4], vec![3, 1]]
    }

    #[test]
    fn single_sample_is_outer_product() {
        let m = tiny(2);
        let s = key_stats_at(&m, &texts(), &[(0, 2)], 0, 1.0).unwrap();
        let k = m.keys_at(&texts()[0], 0).unwrap();
        let k = k.row(2);
        for i in 0..k.len() {
            for j in 0..k.len() {
                assert!((s.c0.matrix().get(i, j) - k[i] * k[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn too_few_positions() {
        let m = tiny(2);
        // 3 + 2 + 1 eligible positions.
        assert!(estimate_key_stats(&m, &texts(), 0, 6, 0, 1.0).is_ok());
        assert!(matches!(estimate_key_stats(&m, &texts(), 0, 7, 0, 1.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn identity_metric() {
        let s = KeyStats::new(0, SymmetricPsd::identity(4), 1, 1.0).unwrap();
        let d = Matrix::from_rows(&[&[1.0, 0.0, 2.0, 0.0], &[0.0, -1.0, 0.0, 1.0]]);
        assert!((delta_k_normsq(&d, &s).unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(delta_k_normsq(&Matrix::zeros(2, 4), &s).unwrap(), 0.0);
        assert_eq!(key_total_normsq(&s), 4.0);
        assert_eq!(key_total_normsq(&s.clone().with_lambda(3.0).unwrap()), 12.0);
        assert!(matches!(delta_k_normsq(&Matrix::zeros(2, 3), &s), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn save_load() {
        let m = tiny(4);
        let a = estimate_key_stats(&m, &texts(), 0, 5, 1, 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.wltf");
        save_key_stats(&[a.clone()], &p).unwrap();
        let back = load_key_stats(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!((back[0].layer, back[0].sample_count, back[0].lambda), (0, 5, 2.5));
        assert!(back[0].c0.matrix().sub(a.c0.matrix()).max_abs() < 1e-6 * a.c0.trace().max(1.0));
    }
}
