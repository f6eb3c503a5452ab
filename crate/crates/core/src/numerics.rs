//! Dense linear algebra and optimizer kernels shared by the rest of the crate.
//!
//! Everything here computes in `f64`. Matrices are row-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default guard for norms close to zero.
pub const NORM_EPS: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry at {i}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Keeps the listed rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[..k]);
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), o);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul_bt", self.cols, other.cols)?;
        // row-times-row dot products reduce poorly; the axpy form vectorizes
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`
    pub fn matmul_at(&self, other: &Matrix) -> Result<Matrix> {
        check_dim("matmul_at", self.rows, other.rows)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                axpy(aki, b, &mut out.data[i * other.cols..(i + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    /// Column sums.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }
}

fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

/// Inner product over the common prefix, with four running partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Pairwise cosine similarities between the rows of `a` (N×D) and `b` (M×D).
///
/// Norms are floored at `eps`, so a near-zero row yields similarities near 0.
/// Results are clamped to [-1, 1].
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix, eps: f64) -> Result<Matrix> {
    check_dim("cosine_similarity_matrix", a.cols, b.cols)?;
    if a.cols == 0 {
        return Err(Error::Contract("cosine similarity needs D >= 1".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let na: Vec<f64> = (0..a.rows).map(|i| norm(a.row(i)).max(eps)).collect();
    let nb: Vec<f64> = (0..b.rows).map(|j| norm(b.row(j)).max(eps)).collect();
    let mut out = a.matmul_bt(b)?;
    for i in 0..a.rows {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v / (na[i] * nb[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Scales every row to unit norm. Rows with norm below `eps` are zeroed and
/// their indices returned.
pub fn l2_normalize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<usize>) {
    let mut out = x.clone();
    let mut degenerate = Vec::new();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = norm(row);
        if n < eps {
            row.iter_mut().for_each(|v| *v = 0.0);
            degenerate.push(r);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, degenerate)
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Each eigenvector is signed so that its largest-magnitude component is positive.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    let n = s.rows;
    if s.cols != n {
        return Err(Error::Shape(format!("sym_eig needs a square matrix, got {}x{}", s.rows, s.cols)));
    }
    let scale = s.max_abs();
    for i in 0..n {
        for j in (i + 1)..n {
            if (s.get(i, j) - s.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::Contract(format!(
                    "sym_eig input is not symmetric at ({i},{j})"
                )));
            }
        }
    }

    // symmetrize exactly so rotations act on a truly symmetric matrix
    let mut a = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, m);
            a.set(j, i, m);
        }
    }
    let mut v = Matrix::identity(n);

    let frob2: f64 = a.data.iter().map(|x| x * x).sum();
    let tol2 = (f64::EPSILON * f64::EPSILON) * frob2;
    let mut converged = n <= 1 || frob2 == 0.0;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off <= tol2 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // skip rotations that cannot change the diagonal in floating point
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let t = if tau == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                rotate_columns(&mut a, p, q, c, sn);
                rotate_rows(&mut a, p, q, c, sn);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                rotate_columns(&mut v, p, q, c, sn);
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        let mut col = v.column(old_c);
        // near-ties in magnitude resolve to the first index
        let peak = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let lead = col
            .iter()
            .position(|x| x.abs() >= peak * (1.0 - 1e-9))
            .unwrap_or(0);
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in col.into_iter().enumerate() {
            vectors.set(r, new_c, x);
        }
    }
    Ok(SymEig { values, vectors })
}

fn rotate_columns(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    for k in 0..m.rows {
        let mkp = m.data[k * cols + p];
        let mkq = m.data[k * cols + q];
        m.data[k * cols + p] = c * mkp - s * mkq;
        m.data[k * cols + q] = s * mkp + c * mkq;
    }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    for k in 0..cols {
        let mpk = m.data[p * cols + k];
        let mqk = m.data[q * cols + k];
        m.data[p * cols + k] = c * mpk - s * mqk;
        m.data[q * cols + k] = s * mpk + c * mqk;
    }
}

/// Gram-Schmidt orthonormalization of the columns of a D×k matrix.
///
/// Uses two projection passes per column. A column whose residual falls below
/// `1e-12` relative to its original norm is reported as rank deficient.
pub fn orthonormalize_columns(m: &Matrix) -> Result<Matrix> {
    let (d, k) = (m.rows, m.cols);
    if k > d {
        return Err(Error::Dimension {
            context: "orthonormalize_columns (k <= D)",
            expected: d,
            found: k,
        });
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut col = m.column(j);
        let original = norm(&col);
        for _pass in 0..2 {
            for q in &basis {
                let proj = dot(q, &col);
                axpy(-proj, q, &mut col);
            }
        }
        let residual = norm(&col);
        if original < 1e-12 || residual < 1e-12 * original {
            return Err(Error::Rank {
                column: j,
                pivot: if original > 0.0 { residual / original } else { 0.0 },
            });
        }
        col.iter_mut().for_each(|x| *x /= residual);
        basis.push(col);
    }
    let mut out = Matrix::zeros(d, k);
    for (j, col) in basis.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            out.set(r, j, x);
        }
    }
    Ok(out)
}

/// A named slice of parameters with its gradient, as seen by the optimizer.
pub struct ParamBlock<'a> {
    pub name: &'static str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

/// Adam optimizer state for a fixed list of parameter blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(block_sizes: &[usize], lr: f64) -> Self {
        AdamState {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Gradients are checked for finiteness
    /// before any parameter is touched.
    pub fn step(&mut self, blocks: &mut [ParamBlock<'_>]) -> Result<()> {
        if blocks.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} blocks, got {}",
                self.m.len(),
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.params.len() != self.m[i].len() || b.grads.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "parameter block {} has {} params and {} grads, optimizer expects {}",
                    b.name,
                    b.params.len(),
                    b.grads.len(),
                    self.m[i].len()
                )));
            }
            if b.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter block {}",
                    b.name
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, b) in blocks.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..b.params.len() {
                let g = b.grads[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                b.params[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
