//! Dense linear algebra shared by the model, the editor and the washer.
//!
//! Everything is `f64`, row-major, and deliberately small: the largest
//! system solved anywhere in the crate is `d_mlp × d_mlp`.

use std::fmt;

use crate::error::{Error, Result};

/// Singularity threshold for the Cholesky condition estimate.
pub const MAX_CONDITION: f64 = 1e12;

/// Iteration cap for [`top_generalized_eigenpair`].
pub const EIGEN_MAX_ITERS: usize = 10_000;

/// Relative tolerance for [`top_generalized_eigenpair`].
pub const EIGEN_TOL: f64 = 1e-10;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = self.row(r);
            let shown: Vec<String> = row.iter().take(8).map(|x| format!("{x:.4}")).collect();
            writeln!(f, "  {}{}", shown.join(", "), if self.cols > 8 { ", …" } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  …")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("entry {i} of a {rows}x{cols} matrix")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data).expect("finite literal matrix")
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(dim: usize, cols: &[Vec<f64>]) -> Self {
        let mut m = Self::zeros(dim, cols.len());
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), dim, "column length");
            for (i, &x) in col.iter().enumerate() {
                m.data[i * cols.len() + j] = x;
            }
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &x) in diag.iter().enumerate() {
            m.set(i, i, x);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            for (j, &c) in idx.iter().enumerate() {
                out.data[r * idx.len() + j] = self.get(r, c);
            }
        }
        out
    }

    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "hstack {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.data[r * cols..r * cols + self.cols].copy_from_slice(self.row(r));
            out.data[r * cols + self.cols..(r + 1) * cols].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add_diag(&mut self, s: f64) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            self.data[i * self.cols + i] += s;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Frobenius inner product `tr(self · otherᵀ)`.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec shape");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `Gram = self · selfᵀ`, symmetrized exactly.
    pub fn gram(&self) -> Matrix {
        let mut g = self.matmul_t(self);
        symmetrize(&mut g);
        g
    }
}

/// `c = alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_in_place(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the owned buffers exactly, and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn symmetrize(m: &mut Matrix) {
    let n = m.rows;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

/// Symmetric positive-semidefinite matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricPsd(Matrix);

impl SymmetricPsd {
    /// Validates symmetry and (via a shifted Cholesky) semidefiniteness.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::ShapeMismatch(format!("{}x{} is not square", m.rows, m.cols)));
        }
        if !m.is_finite() {
            return Err(Error::NonFinite("symmetric matrix".into()));
        }
        let n = m.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                    return Err(Error::NotPsd(format!("asymmetric at ({i},{j}): {a} vs {b}")));
                }
            }
        }
        let tr = m.trace();
        if tr < 0.0 {
            return Err(Error::NotPsd(format!("negative trace {tr}")));
        }
        // Eigenvalues ≥ −1e-8·tr ⇔ m + 1e-8·tr·I is PSD; a tiny extra shift keeps
        // Cholesky stable on exact boundary cases.
        let mut shifted = m.clone();
        shifted.add_diag(1e-8 * tr + f64::MIN_POSITIVE.sqrt() + 1e-12 * tr);
        if n > 0 && Cholesky::factor(&shifted).is_err() {
            return Err(Error::NotPsd("negative eigenvalue beyond tolerance".into()));
        }
        let mut m = m;
        symmetrize(&mut m);
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, s: f64) -> SymmetricPsd {
        assert!(s >= 0.0, "PSD scale must be non-negative");
        Self(self.0.scale(s))
    }
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows;
        assert_eq!(n, a.cols, "cholesky of non-square");
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if d.is_nan() || d <= 0.0 {
                return Err(Error::SingularSystem(format!("non-positive pivot {d:e} at {j}")));
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Self { l })
    }

    /// Squared ratio of the extreme pivots; a lower bound on the 2-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.l.rows;
        if n == 0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = self.l.get(i, i);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }

    pub fn factor_matrix(&self) -> &Matrix {
        &self.l
    }

    /// Solves `L y = b` in place.
    pub fn forward_sub(&self, b: &mut [f64]) {
        let n = self.l.rows;
        for i in 0..n {
            let row = self.l.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_sub(&self, y: &mut [f64]) {
        let n = self.l.rows;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_sub(&mut x);
        self.backward_sub(&mut x);
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let bt = b.transpose();
        let mut xt = Matrix::zeros(bt.rows, bt.cols);
        for c in 0..bt.rows {
            let x = self.solve_vec(bt.row(c));
            xt.row_mut(c).copy_from_slice(&x);
        }
        xt.transpose()
    }

    /// Solves `X A = B` (right division), using symmetry of `A`.
    pub fn solve_right(&self, b: &Matrix) -> Matrix {
        let mut x = Matrix::zeros(b.rows, b.cols);
        for r in 0..b.rows {
            let sol = self.solve_vec(b.row(r));
            x.row_mut(r).copy_from_slice(&sol);
        }
        x
    }
}

/// Factors a symmetric system, reporting near-singular ones.
pub fn factor_checked(a: &Matrix) -> Result<Cholesky> {
    let ch = Cholesky::factor(a)?;
    let cond = ch.condition_estimate();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularSystem(format!("condition estimate {cond:e}")));
    }
    Ok(ch)
}

/// Squared Frobenius norm.
pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum()
}

/// Ridge least squares: `argmin_W ||W K − V||² + ridge·||W||²`.
///
/// `keys` is `d₂ × n`, `values` is `d₁ × n`, the result is `d₁ × d₂`.
pub fn least_squares_fit(keys: &Matrix, values: &Matrix, ridge: f64) -> Result<Matrix> {
    if keys.cols != values.cols {
        return Err(Error::ShapeMismatch(format!(
            "{} keys vs {} values",
            keys.cols, values.cols
        )));
    }
    if keys.cols == 0 {
        return Err(Error::InsufficientData("least squares needs at least one column".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Config(format!("ridge must be non-negative, got {ridge}")));
    }
    let mut gram = keys.gram();
    gram.add_diag(ridge);
    let ch = if ridge > 0.0 { Cholesky::factor(&gram)? } else { factor_checked(&gram)? };
    // W G = V Kᵀ
    Ok(ch.solve_right(&values.matmul_t(keys)))
}

/// Top eigenpair of `A v = λ (B + εI) v` by power iteration on the whitened operator.
///
/// Returns `(λ_max, v)` with `v` unit-norm in the Euclidean sense.
pub fn top_generalized_eigenpair(
    a: &SymmetricPsd,
    b: &SymmetricPsd,
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::ShapeMismatch(format!("pencil dims {n} vs {}", b.dim())));
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut breg = b.matrix().clone();
    breg.add_diag(eps);
    let ch = Cholesky::factor(&breg)?;

    // M = L⁻¹ A L⁻ᵀ, symmetric PSD.
    let mut linv_a = Matrix::zeros(n, n);
    let at = a.matrix(); // symmetric, so columns == rows
    for c in 0..n {
        let mut col = at.row(c).to_vec();
        ch.forward_sub(&mut col);
        for r in 0..n {
            linv_a.set(r, c, col[r]);
        }
    }
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        let mut row = linv_a.row(r).to_vec();
        ch.forward_sub(&mut row);
        m.row_mut(r).copy_from_slice(&row);
    }
    symmetrize(&mut m);

    let scale = m.max_abs();
    if scale == 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return Ok((0.0, v));
    }

    // Deterministic start with weight on every coordinate.
    let mut y: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919 % 101) as f64) / 101.0).collect();
    let ny = norm(&y);
    y.iter_mut().for_each(|x| *x /= ny);

    let mut lambda = 0.0;
    let mut converged = false;
    for _ in 0..EIGEN_MAX_ITERS {
        let my = m.matvec(&y);
        lambda = dot(&y, &my);
        let resid: f64 = my.iter().zip(&y).map(|(p, q)| (p - lambda * q).powi(2)).sum::<f64>().sqrt();
        if resid <= EIGEN_TOL * lambda.abs().max(scale * 1e-300) || resid <= 1e-15 * scale {
            converged = true;
            break;
        }
        let nm = norm(&my);
        if nm == 0.0 {
            lambda = 0.0;
            converged = true;
            break;
        }
        y = my.into_iter().map(|x| x / nm).collect();
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "generalized power iteration after {EIGEN_MAX_ITERS} iterations (λ≈{lambda:e})"
        )));
    }
    let mut v = y;
    ch.backward_sub(&mut v);
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    Ok((lambda, v))
}
