//! Dense linear algebra for the regression fits: symmetric positive-definite
//! solves, weighted normal equations, rank-revealing least squares and a
//! general LU solve for the (nonsymmetric) bread matrix of the sandwich.
//!
//! Everything here is a pure function of its inputs.

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Callers guarantee the length and finiteness invariants.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch("column length".into()));
        }
        let cols = columns.len();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(rows, cols, data)
    }

    pub fn column_vector(v: &[f64]) -> Result<Self> {
        Self::new(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Matrix::from_raw(self.rows, idx.len(), data)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(idx.len(), self.cols, data)
    }

    /// Horizontal concatenation.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::DimensionMismatch("hstack row counts".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix::from_raw(rows, cols, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solve `a x = b` for symmetric positive-definite `a` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} system with right-hand side of length {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    if !a.is_symmetric(SYMMETRY_TOLERANCE) {
        return Err(Error::NotSymmetric);
    }
    let l = cholesky(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Lower Cholesky factor; fails on pivots below the rank tolerance.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a[(i, i)]));
    let tol = RANK_TOLERANCE * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol || d <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// `(Σ wᵢ xᵢ xᵢᵀ, Σ wᵢ xᵢ yᵢ)`. The Gram matrix is filled from its upper
/// triangle, so it is exactly symmetric.
pub fn weighted_gram(x: &Matrix, w: &[f64], y: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    let (n, k) = (x.rows(), x.cols());
    if w.len() != n || y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, weights {}, response {}",
            w.len(),
            y.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let mut g = Matrix::zeros(k, k);
    let mut xty = vec![0.0; k];
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..k {
            let wa = wi * row[a];
            xty[a] += wa * y[i];
            for b in a..k {
                g[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    Ok((g, xty))
}

/// Columns that are linearly dependent on earlier columns, found by an
/// in-order Cholesky sweep of the Gram matrix. Trailing members of each
/// collinear set are reported.
pub fn collinear_columns(gram: &Matrix) -> Vec<usize> {
    let k = gram.rows();
    let max_diag = (0..k).fold(0.0_f64, |m, i| m.max(gram[(i, i)]));
    let tol = RANK_TOLERANCE * max_diag;
    // Rows of the partial factor for retained columns, indexed by position in `kept`.
    let mut kept: Vec<usize> = Vec::new();
    let mut l: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..k {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (p, &c) in kept.iter().enumerate() {
            let mut s = gram[(j, c)];
            for q in 0..p {
                s -= row[q] * l[p][q];
            }
            row.push(s / l[p][p]);
        }
        let d = gram[(j, j)] - row.iter().map(|v| v * v).sum::<f64>();
        if d <= tol || d <= 0.0 {
            dropped.push(j);
        } else {
            row.push(d.sqrt());
            kept.push(j);
            l.push(row);
        }
    }
    dropped
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    /// One entry per design column; dropped columns are pinned to zero.
    pub coefficients: Vec<f64>,
    pub dropped: Vec<usize>,
}

/// Minimise `Σ wᵢ (yᵢ − xᵢᵀβ)²`. Collinear columns are dropped (coefficient 0)
/// and the retained system is solved by Householder QR on `√w·X`.
pub fn solve_least_squares(x: &Matrix, w: &[f64], y: &[f64]) -> Result<LeastSquares> {
    let (gram, _) = weighted_gram(x, w, y)?;
    if y.iter().zip(w).any(|(v, wi)| *wi > 0.0 && !v.is_finite()) {
        return Err(Error::NonFinite("response"));
    }
    let rows: Vec<usize> = (0..x.rows()).filter(|&i| w[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::DegenerateFit("no rows with positive weight".into()));
    }
    let dropped = collinear_columns(&gram);
    let kept: Vec<usize> = (0..x.cols()).filter(|j| !dropped.contains(j)).collect();
    let mut coefficients = vec![0.0; x.cols()];
    if kept.is_empty() {
        return Ok(LeastSquares {
            coefficients,
            dropped,
        });
    }
    let mut a = Matrix::zeros(rows.len(), kept.len());
    let mut rhs = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let sw = w[i].sqrt();
        let row = x.row(i);
        for (c, &j) in kept.iter().enumerate() {
            a[(r, c)] = sw * row[j];
        }
        rhs.push(sw * y[i]);
    }
    let beta = householder_solve(a, rhs)?;
    for (c, &j) in kept.iter().enumerate() {
        coefficients[j] = beta[c];
    }
    Ok(LeastSquares {
        coefficients,
        dropped,
    })
}

/// Least-squares solution of a full-column-rank system via Householder QR.
fn householder_solve(mut a: Matrix, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::DegenerateFit(format!(
            "{m} rows for {n} retained columns"
        )));
    }
    for j in 0..n {
        let norm = (j..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Singular);
        }
        let alpha = if a[(j, j)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| a[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..n {
                let s: f64 = (j..m).map(|i| v[i - j] * a[(i, c)]).sum::<f64>() * 2.0 / vnorm2;
                for i in j..m {
                    a[(i, c)] -= s * v[i - j];
                }
            }
            let s: f64 = (j..m).map(|i| v[i - j] * b[i]).sum::<f64>() * 2.0 / vnorm2;
            for i in j..m {
                b[i] -= s * v[i - j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[(i, k)] * x[k];
        }
        if a[(i, i)] == 0.0 {
            return Err(Error::Singular);
        }
        x[i] = s / a[(i, i)];
    }
    Ok(x)
}

/// LU factorisation with partial pivoting, `P a = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    /// Fails with [`Error::Singular`] when a pivot falls below `1e-12 · max|a|`.
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch("LU of a non-square matrix".into()));
        }
        let tol = 1e-12 * a.max_abs();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if pmax <= tol || pmax == 0.0 {
                return Err(Error::Singular);
            }
            if p != k {
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = t;
                }
                perm.swap(k, p);
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.lu[(i, k)] * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.lu[(i, k)] * y[k];
            }
            y[i] /= self.lu[(i, i)];
        }
        y
    }

    /// Solve `aᵀ x = b`.
    pub fn solve_transposed(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        // aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ y = z, then x = Pᵀ y.
        let mut z = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                z[i] -= self.lu[(k, i)] * z[k];
            }
            z[i] /= self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                z[i] -= self.lu[(k, i)] * z[k];
            }
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let l = cholesky(a)?;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}
