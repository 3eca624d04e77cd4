//! Dense real linear algebra used by the adapter, proximal and theory layers.
//!
//! Everything here works on small row-major [`Matrix`] values (a few hundred
//! rows at most) in double precision:
//!
//! * [`sym_eig`]: cyclic Jacobi eigendecomposition of a symmetric matrix.
//! * [`spd_solve`]: Cholesky solve with one step of iterative refinement.
//! * [`gen_eig`]: the generalized problem `S q = ρ H q` restricted to `range(H)`,
//!   with `H`-orthonormal vectors.
//! * [`svd_topk`]: one-sided (Hestenes) Jacobi SVD, truncated to the top `k` triplets.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOL: f64 = 1e-12;
const RANGE_REL_THRESHOLD: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::pre(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::pre("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Column vector as an `n x 1` matrix.
    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[f64]) {
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ v` without materializing the transpose.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * x;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `⟨self, other⟩ = Σ self_ij other_ij`.
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "frobenius_dot shape mismatch");
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Symmetric within `rel_tol · max(1, max|m_ij|)`.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = rel_tol * self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Block-diagonal assembly of square blocks.
    pub fn block_diag(blocks: &[Matrix]) -> Matrix {
        let n: usize = blocks.iter().map(|b| b.rows).sum();
        let mut out = Matrix::zeros(n, n);
        let mut off = 0;
        for b in blocks {
            assert!(b.is_square(), "block_diag needs square blocks");
            for i in 0..b.rows {
                for j in 0..b.cols {
                    out[(off + i, off + j)] = b[(i, j)];
                }
            }
            off += b.rows;
        }
        out
    }

    /// `uᵀ self w`
    pub fn quad_form(&self, u: &[f64], w: &[f64]) -> f64 {
        dot(u, &self.matvec(w))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Eigenpairs sorted by descending value; `vectors` holds one pair per column.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.col(k)
    }
}

/// Flips `v` so that its first non-negligible entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let scale = norm_inf(v);
    if scale == 0.0 {
        return;
    }
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn sort_pairs_desc(values: Vec<f64>, vectors: &Matrix) -> EigenPairs {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut sorted = Matrix::zeros(vectors.rows(), n);
    let mut sorted_values = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        let mut v = vectors.col(i);
        canonical_sign(&mut v);
        sorted.set_col(k, &v);
        sorted_values.push(values[i]);
    }
    EigenPairs {
        values: sorted_values,
        vectors: sorted,
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(m: &Matrix) -> Result<EigenPairs> {
    if !m.is_square() {
        return Err(Error::pre(format!("sym_eig needs a square matrix, got {:?}", m.shape())));
    }
    if !m.is_symmetric(1e-12) {
        return Err(Error::pre("sym_eig needs a symmetric matrix"));
    }
    let n = m.rows();
    let mut a = m.clone();
    // symmetrize exactly so rotations see a consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok(sort_pairs_desc(vec![0.0; n], &v));
    }

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= JACOBI_OFF_TOL * scale;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {:e})",
                off_norm(&a)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                if t == 0.0 {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm(&a) <= JACOBI_OFF_TOL * scale;
    }
    let values = (0..n).map(|i| a[(i, i)]).collect();
    Ok(sort_pairs_desc(values, &v))
}

fn cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    let scale = (0..n).fold(0.0_f64, |s, i| s.max(m[(i, i)].abs()));
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-14 * scale) || !d.is_finite() {
            return Err(Error::Factorization { pivot: j });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `M x = b` for symmetric positive definite `M`.
pub fn spd_solve(m: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if !m.is_square() || m.rows() != b.len() {
        return Err(Error::pre(format!(
            "spd_solve shape mismatch: matrix {:?}, rhs {}",
            m.shape(),
            b.len()
        )));
    }
    if !m.is_symmetric(1e-12) {
        return Err(Error::pre("spd_solve needs a symmetric matrix"));
    }
    let l = cholesky(m)?;
    let mut x = cholesky_solve(&l, b);
    // one refinement step on the residual
    let mx = m.matvec(&x);
    let r: Vec<f64> = b.iter().zip(&mx).map(|(bi, mi)| bi - mi).collect();
    let dx = cholesky_solve(&l, &r);
    for (xi, di) in x.iter_mut().zip(&dx) {
        *xi += di;
    }
    Ok(x)
}

/// Generalized eigenpairs `S q = ρ H q` on `range(H)`, normalized so `qᵢᵀ H qⱼ = δᵢⱼ`.
///
/// `H` is diagonalized, directions with eigenvalue below `1e-10 · max` are
/// dropped, the rest is whitened by `H^{-1/2}` and the reduced matrix is
/// handed to [`sym_eig`]. Returns `rank(H)` pairs.
pub fn gen_eig(s: &Matrix, h: &Matrix) -> Result<EigenPairs> {
    if !s.is_square() || s.shape() != h.shape() {
        return Err(Error::pre(format!(
            "gen_eig shape mismatch: S {:?}, H {:?}",
            s.shape(),
            h.shape()
        )));
    }
    let m = s.rows();
    let h_eig = sym_eig(h)?;
    let max_eig = h_eig.values.first().copied().unwrap_or(0.0);
    if max_eig <= 0.0 {
        return Ok(EigenPairs {
            values: Vec::new(),
            vectors: Matrix::zeros(m, 0),
        });
    }
    let threshold = RANGE_REL_THRESHOLD * max_eig;
    let kept: Vec<usize> = (0..h_eig.len()).filter(|&i| h_eig.values[i] > threshold).collect();
    let r = kept.len();
    let mut whiten = Matrix::zeros(m, r);
    for (c, &i) in kept.iter().enumerate() {
        let inv_sqrt = 1.0 / h_eig.values[i].sqrt();
        for row in 0..m {
            whiten[(row, c)] = h_eig.vectors[(row, i)] * inv_sqrt;
        }
    }
    let reduced = whiten.transpose().matmul(s).matmul(&whiten);
    let mut reduced_sym = reduced.clone();
    for i in 0..r {
        for j in 0..r {
            reduced_sym[(i, j)] = 0.5 * (reduced[(i, j)] + reduced[(j, i)]);
        }
    }
    let inner = sym_eig(&reduced_sym)?;
    let q = whiten.matmul(&inner.vectors);
    let mut vectors = Matrix::zeros(m, r);
    for k in 0..r {
        let mut col = q.col(k);
        canonical_sign(&mut col);
        vectors.set_col(k, &col);
    }
    Ok(EigenPairs {
        values: inner.values,
        vectors,
    })
}

/// Truncated singular value decomposition.
#[derive(Debug, Clone)]
pub struct Svd {
    pub values: Vec<f64>,
    /// `rows x k`, orthonormal columns.
    pub left: Matrix,
    /// `cols x k`, orthonormal columns.
    pub right: Matrix,
}

impl Svd {
    /// `U diag(σ) Vᵀ` of the retained triplets.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.left.clone();
        for c in 0..us.cols() {
            for r in 0..us.rows() {
                us[(r, c)] *= self.values[c];
            }
        }
        us.matmul(&self.right.transpose())
    }
}

/// Top-`k` singular triplets by one-sided Jacobi orthogonalization.
pub fn svd_topk(m: &Matrix, k: usize) -> Result<Svd> {
    let (rows, cols) = m.shape();
    if k > rows.min(cols) {
        return Err(Error::pre(format!(
            "svd_topk: k = {k} exceeds min(rows, cols) = {}",
            rows.min(cols)
        )));
    }
    if rows < cols {
        let t = svd_topk(&m.transpose(), k)?;
        return Ok(Svd {
            values: t.values,
            left: t.right,
            right: t.left,
        });
    }
    // work on columns of U = M V
    let mut u = m.clone();
    let mut v = Matrix::identity(cols);
    let scale = m.frobenius_norm();
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    let up = u[(r, p)];
                    let uq = u[(r, q)];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let up = u[(r, p)];
                    let uq = u[(r, q)];
                    u[(r, p)] = c * up - s * uq;
                    u[(r, q)] = s * up + c * uq;
                }
                for r in 0..cols {
                    let vp = v[(r, p)];
                    let vq = v[(r, q)];
                    v[(r, p)] = c * vp - s * vq;
                    v[(r, q)] = s * vp + c * vq;
                }
            }
        }
        sweeps += 1;
        if !rotated || scale == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "one-sided Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
    }
    let sigma: Vec<f64> = (0..cols).map(|c| norm2(&u.col(c))).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut left = Matrix::zeros(rows, k);
    let mut right = Matrix::zeros(cols, k);
    let mut values = Vec::with_capacity(k);
    for (slot, &c) in order.iter().take(k).enumerate() {
        let s = sigma[c];
        let mut vcol = v.col(c);
        let mut ucol: Vec<f64> = if s > 0.0 {
            u.col(c).iter().map(|x| x / s).collect()
        } else {
            vec![0.0; rows]
        };
        // tie the sign of the pair to the right vector
        let before = vcol.clone();
        canonical_sign(&mut vcol);
        if vcol != before {
            ucol.iter_mut().for_each(|x| *x = -*x);
        }
        left.set_col(slot, &ucol);
        right.set_col(slot, &vcol);
        values.push(s);
    }
    Ok(Svd {
        values,
        left,
        right,
    })
}
