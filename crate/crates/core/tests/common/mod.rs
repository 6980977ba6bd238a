//! Independent reference implementations used as test oracles. They share no
//! code with the crate beyond reading `Matrix` entries.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use washlab::corpus::{generate, CorpusBundle, CorpusConfig};
use washlab::kv_memory::KeyStats;
use washlab::model::{Model, ModelConfig};
use washlab::numerics::{Matrix, SymmetricPsd};

pub type Dense = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn from_dense(d: &Dense) -> Matrix {
    let rows: Vec<&[f64]> = d.iter().map(|r| r.as_slice()).collect();
    Matrix::from_rows(&rows)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn mul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                c[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    c
}

pub fn transpose(a: &Dense) -> Dense {
    let (n, m) = (a.len(), a[0].len());
    (0..m).map(|j| (0..n).map(|i| a[i][j]).collect()).collect()
}

pub fn sub(a: &Dense, b: &Dense) -> Dense {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
}

pub fn frob_sq(a: &Dense) -> f64 {
    a.iter().flatten().map(|x| x * x).sum()
}

/// `‖a − b‖ / max(‖b‖, tiny)` in Frobenius norm.
pub fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
    let (a, b) = (to_dense(a), to_dense(b));
    (frob_sq(&sub(&a, &b)) / frob_sq(&b).max(1e-300)).sqrt()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Dense) -> Option<Dense> {
    let n = a.len();
    let mut m: Dense = a.iter().cloned().collect();
    let mut inv: Dense = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for j in 0..n {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for j in 0..n {
                        m[r][j] -= f * m[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// `W = V Kᵀ (K Kᵀ + ridge I)⁻¹` straight from the normal equations.
pub fn normal_equation_fit(k: &Matrix, v: &Matrix, ridge: f64) -> Matrix {
    let (k, v) = (to_dense(k), to_dense(v));
    let kt = transpose(&k);
    let mut kkt = mul(&k, &kt);
    for (i, row) in kkt.iter_mut().enumerate() {
        row[i] += ridge;
    }
    from_dense(&mul(&mul(&v, &kt), &inverse(&kkt).expect("invertible")))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &Dense) -> (Vec<f64>, Dense) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Dense = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Largest `λ` with `A x = λ (B + εI) x`, via `(B+εI)^{-1/2} A (B+εI)^{-1/2}`.
pub fn generalized_top(a: &Matrix, b: &Matrix, eps: f64) -> f64 {
    let mut bd = to_dense(b);
    for (i, row) in bd.iter_mut().enumerate() {
        row[i] += eps;
    }
    let (vals, vecs) = jacobi_eigen(&bd);
    let n = vals.len();
    let mut half_inv = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            half_inv[i][j] = (0..n).map(|k| vecs[i][k] * vecs[j][k] / vals[k].sqrt()).sum();
        }
    }
    let m = mul(&mul(&half_inv, &to_dense(a)), &half_inv);
    let sym: Dense = (0..n).map(|i| (0..n).map(|j| 0.5 * (m[i][j] + m[j][i])).collect()).collect();
    jacobi_eigen(&sym).0.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `K Kᵀ / n` accumulated one column at a time.
pub fn second_moment_by_loops(k: &Matrix) -> Matrix {
    let (d, n) = k.shape();
    let mut c = vec![vec![0.0; d]; d];
    for s in 0..n {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += k.get(i, s) * k.get(j, s);
            }
        }
    }
    for row in &mut c {
        for x in row.iter_mut() {
            *x /= n as f64;
        }
    }
    from_dense(&c)
}

/// Key statistics whose `λC₀` equals `K Kᵀ` exactly for the explicit `K` (`d × n`).
pub fn explicit_stats(k: &Matrix) -> KeyStats {
    let n = k.cols();
    let c0 = SymmetricPsd::new(second_moment_by_loops(k)).unwrap();
    KeyStats::new(0, c0, n, n as f64).unwrap()
}

pub fn small_corpus() -> CorpusBundle {
    generate(&CorpusConfig {
        n_facts: 30,
        n_neighborhood: 5,
        n_reasoning_train: 40,
        n_reasoning_eval: 20,
        n_filler_train: 60,
        n_filler_eval: 10,
        ..CorpusConfig::default()
    })
    .unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { n_layers: 3, d_model: 16, d_mlp: 24, n_heads: 2, context: 32 }
}

pub fn tiny_model(corpus: &CorpusBundle, seed: u64) -> Model {
    Model::new(tiny_config(), corpus.vocab.clone(), seed).unwrap()
}

/// Straight-line forward pass: returns (logits, keys per layer), each row-major `T × ·`.
pub fn naive_forward(model: &Model, tokens: &[usize]) -> (Dense, Vec<Dense>) {
    let cfg = model.config;
    let p = &model.params;
    let (d, t_len) = (cfg.d_model, tokens.len());
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let ln = |x: &[f64], g: &Matrix, b: &Matrix| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        (0..d).map(|c| (x[c] - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c)).collect()
    };
    // y = W x for W stored out × in
    let apply = |w: &Matrix, x: &[f64]| -> Vec<f64> { (0..w.rows()).map(|r| (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum()).collect() };

    let mut h: Dense = (0..t_len).map(|t| (0..d).map(|c| p.tok_emb.get(tokens[t], c) + p.pos_emb.get(t, c)).collect()).collect();
    let mut all_keys = Vec::new();
    let hd = d / cfg.n_heads;
    for lp in &p.layers {
        let n: Dense = h.iter().map(|x| ln(x, &lp.ln_g, &lp.ln_b)).collect();
        let q: Dense = n.iter().map(|x| apply(&lp.w_q, x)).collect();
        let k: Dense = n.iter().map(|x| apply(&lp.w_k, x)).collect();
        let v: Dense = n.iter().map(|x| apply(&lp.w_v, x)).collect();
        let mut att = vec![vec![0.0; d]; t_len];
        for head in 0..cfg.n_heads {
            let r = head * hd..(head + 1) * hd;
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - mx).exp() / z;
                    for c in r.clone() {
                        att[i][c] += w * v[j][c];
                    }
                }
            }
        }
        let keys: Dense = n
            .iter()
            .map(|x| apply(&lp.w_in, x).iter().enumerate().map(|(i, a)| gelu(a + lp.b_in.get(0, i))).collect())
            .collect();
        for t in 0..t_len {
            let a = apply(&lp.w_o, &att[t]);
            let m = apply(&lp.w_out, &keys[t]);
            for c in 0..d {
                h[t][c] += a[c] + m[c];
            }
        }
        all_keys.push(keys);
    }
    let logits = h.iter().map(|x| apply(&p.head, &ln(x, &p.lnf_g, &p.lnf_b))).collect();
    (logits, all_keys)
}
