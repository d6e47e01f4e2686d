//! Dense small-matrix kernels: matrix exponential, pivoted linear solves and
//! Sylvester equations.
//!
//! Everything here works on [`DenseMatrix`], a row-major `f64` matrix sized for
//! the handful of states a fluid model carries. There is no sparse path.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative pivot threshold below which a matrix is reported singular.
pub const PIVOT_TOL: f64 = 1e-13;

/// Default relative tolerance requested from [`matrix_exp`].
pub const EXPM_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is singular to working precision (pivot {pivot:.3e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("matrix exponential overflowed")]
    Overflow,
    #[error("non-finite entry in input")]
    NonFinite,
    #[error("relative tolerance {0} outside (0, 1e-6]")]
    BadTolerance(f64),
}

/// Row-major dense matrix of finite reals.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix from nested rows. All rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NumericsError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(NumericsError::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// A single-column matrix.
    pub fn column(v: &[f64]) -> Self {
        DenseMatrix {
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Infinity norm: maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// One norm: maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn scale(&self, k: f64) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * k).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, NumericsError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    /// `self + k * I`.
    pub fn shift_diag(&self, k: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += k;
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if self.cols != v.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "cannot apply {}x{} to a vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Sub-matrix on the given row and column index sets, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                out[(a, b)] = self[(i, j)];
            }
        }
        out
    }

    /// Multiplies row `i` by `d[i]` (left multiplication by `diag(d)`).
    pub fn scale_rows(&self, d: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, k) in d.iter().enumerate().take(self.rows) {
            for x in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *x *= k;
            }
        }
        out
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl serde::Serialize for DenseMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&self.to_rows(), s)
    }
}

impl<'de> serde::Deserialize<'de> for DenseMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <Vec<Vec<f64>> as serde::Deserialize>::deserialize(d)?;
        if rows.is_empty() {
            return Err(serde::de::Error::custom("empty matrix"));
        }
        DenseMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// LU factorization with partial pivoting, `P A = L U` stored in place.
struct Lu {
    n: usize,
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &DenseMatrix) -> Result<Self, NumericsError> {
        if !a.is_square() {
            return Err(NumericsError::ShapeMismatch(format!(
                "expected a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        if !a.is_finite() {
            return Err(NumericsError::NonFinite);
        }
        let n = a.rows;
        let threshold = PIVOT_TOL * a.norm_inf();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (pivot_row, pivot_abs) =
                (col..n)
                    .map(|r| (r, lu[(r, col)].abs()))
                    .fold(
                        (col, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pivot_abs <= threshold || pivot_abs == 0.0 {
                return Err(NumericsError::SingularMatrix {
                    column: col,
                    pivot: pivot_abs,
                });
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.data.swap(col * n + j, pivot_row * n + j);
                }
                perm.swap(col, pivot_row);
            }
            let pivot = lu[(col, col)];
            for r in col + 1..n {
                let factor = lu[(r, col)] / pivot;
                lu[(r, col)] = factor;
                if factor == 0.0 {
                    continue;
                }
                for j in col + 1..n {
                    let u = lu[(col, j)];
                    lu[(r, j)] -= factor * u;
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    fn solve_in_place(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            x[i] = x[..i]
                .iter()
                .enumerate()
                .fold(x[i], |acc, (j, &xj)| acc - self.lu[(i, j)] * xj);
        }
        for i in (0..n).rev() {
            let acc = x[i + 1..]
                .iter()
                .enumerate()
                .fold(x[i], |acc, (k, &xj)| acc - self.lu[(i, i + 1 + k)] * xj);
            x[i] = acc / self.lu[(i, i)];
        }
        x
    }

    fn solve_matrix(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; b.rows];
        for j in 0..b.cols {
            for (i, c) in col.iter_mut().enumerate() {
                *c = b[(i, j)];
            }
            let x = self.solve_in_place(&col);
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Solves `A x = b` by partially pivoted Gaussian elimination.
pub fn solve_linear(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if a.rows != b.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "{}x{} system with right-hand side of length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let lu = Lu::factor(a)?;
    Ok(lu.solve_in_place(b))
}

/// Solves `A X = B` for a matrix right-hand side.
pub fn solve_linear_matrix(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if a.rows != b.rows {
        return Err(NumericsError::ShapeMismatch(format!(
            "{}x{} system with {}x{} right-hand side",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let lu = Lu::factor(a)?;
    Ok(lu.solve_matrix(b))
}

/// Solves `X A + B X = C` for `X` (p×q), with `A` q×q and `B` p×p.
///
/// The equation is linearized into a `pq × pq` system over the row-major
/// entries of `X` and handed to [`solve_linear`]; fine for the state counts
/// this crate deals with.
pub fn solve_sylvester(
    b: &DenseMatrix,
    a: &DenseMatrix,
    c: &DenseMatrix,
) -> Result<DenseMatrix, NumericsError> {
    let (p, q) = (c.rows, c.cols);
    if !a.is_square() || !b.is_square() || a.rows != q || b.rows != p {
        return Err(NumericsError::ShapeMismatch(format!(
            "sylvester: A {}x{}, B {}x{}, C {}x{}",
            a.rows, a.cols, b.rows, b.cols, p, q
        )));
    }
    let n = p * q;
    let mut big = DenseMatrix::zeros(n, n);
    for i in 0..p {
        for j in 0..q {
            let row = i * q + j;
            // (X A)_{ij} = sum_k X_{ik} A_{kj}
            for k in 0..q {
                big[(row, i * q + k)] += a[(k, j)];
            }
            // (B X)_{ij} = sum_k B_{ik} X_{kj}
            for k in 0..p {
                big[(row, k * q + j)] += b[(i, k)];
            }
        }
    }
    let x = solve_linear(&big, c.as_slice())?;
    DenseMatrix::from_vec(p, q, x)
}

// Degree/threshold pairs for the [m/m] Padé approximant in 1-norm
// (Higham 2005, double precision).
const PADE_THETA: [(usize, f64); 5] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
    (13, 5.371_920_351_148_152),
];

fn pade_coefficients(m: usize) -> Vec<f64> {
    // b_j = (2m - j)! m! / ((2m)! j! (m - j)!), built by the ratio b_{j+1}/b_j.
    let mut b = Vec::with_capacity(m + 1);
    b.push(1.0);
    for j in 0..m {
        let prev = b[j];
        let ratio = (m - j) as f64 / ((2 * m - j) as f64 * (j + 1) as f64);
        b.push(prev * ratio);
    }
    b
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant whose degree is picked from the 1-norm of the input.
///
/// Backward error is at unit roundoff, so every admissible `rel_tol` is met
/// on well-conditioned inputs; `rel_tol` must lie in `(0, 1e-6]`.
pub fn matrix_exp(a: &DenseMatrix, rel_tol: f64) -> Result<DenseMatrix, NumericsError> {
    if !(rel_tol > 0.0 && rel_tol <= 1e-6) {
        return Err(NumericsError::BadTolerance(rel_tol));
    }
    if !a.is_square() {
        return Err(NumericsError::ShapeMismatch(format!(
            "matrix_exp of a {}x{} matrix",
            a.rows, a.cols
        )));
    }
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let n = a.rows;
    if n == 1 {
        let e = a[(0, 0)].exp();
        if !e.is_finite() {
            return Err(NumericsError::Overflow);
        }
        return DenseMatrix::from_vec(1, 1, vec![e]);
    }

    let norm = a.norm_one();
    for &(m, theta) in &PADE_THETA[..4] {
        if norm <= theta {
            return finish(pade(a, m)?);
        }
    }
    let (_, theta13) = PADE_THETA[4];
    let squarings = if norm > theta13 {
        (norm / theta13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a.scale(2f64.powi(-squarings));
    let mut e = pade(&scaled, 13)?;
    for _ in 0..squarings {
        e = e.matmul(&e)?;
        if !e.is_finite() {
            return Err(NumericsError::Overflow);
        }
    }
    finish(e)
}

fn finish(e: DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if e.is_finite() {
        Ok(e)
    } else {
        Err(NumericsError::Overflow)
    }
}

fn pade(a: &DenseMatrix, m: usize) -> Result<DenseMatrix, NumericsError> {
    let n = a.rows;
    let b = pade_coefficients(m);
    let ident = DenseMatrix::identity(n);
    let a2 = a.matmul(a)?;

    // Split the numerator as V + U where U collects the odd powers.
    let (u, v) = if m == 13 {
        let a4 = a2.matmul(&a2)?;
        let a6 = a4.matmul(&a2)?;
        let inner_u = a6
            .scale(b[13])
            .add(&a4.scale(b[11]))?
            .add(&a2.scale(b[9]))?;
        let u = a.matmul(
            &a6.matmul(&inner_u)?
                .add(&a6.scale(b[7]))?
                .add(&a4.scale(b[5]))?
                .add(&a2.scale(b[3]))?
                .add(&ident.scale(b[1]))?,
        )?;
        let inner_v = a6
            .scale(b[12])
            .add(&a4.scale(b[10]))?
            .add(&a2.scale(b[8]))?;
        let v = a6
            .matmul(&inner_v)?
            .add(&a6.scale(b[6]))?
            .add(&a4.scale(b[4]))?
            .add(&a2.scale(b[2]))?
            .add(&ident.scale(b[0]))?;
        (u, v)
    } else {
        let mut powers = vec![ident.clone(), a2.clone()];
        while powers.len() <= m / 2 {
            let next = powers.last().unwrap().matmul(&a2)?;
            powers.push(next);
        }
        let mut odd = DenseMatrix::zeros(n, n);
        let mut even = DenseMatrix::zeros(n, n);
        for (k, p) in powers.iter().enumerate() {
            if 2 * k < m {
                odd = odd.add(&p.scale(b[2 * k + 1]))?;
            }
            even = even.add(&p.scale(b[2 * k]))?;
        }
        (a.matmul(&odd)?, even)
    };
    let num = v.add(&u)?;
    let den = v.sub(&u)?;
    solve_linear_matrix(&den, &num)
}
