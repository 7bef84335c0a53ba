//! Small dense linear algebra: row-major matrices, a cyclic Jacobi
//! eigensolver for symmetric matrices and power iteration for the top
//! eigenvalue of a PSD matrix. Sized for |V| ≤ 64.

use std::fmt;

use crate::error::{LcoError, Result};

/// Symmetry tolerance accepted by the eigen routines.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, PartialEq)]
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
        Self {
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LcoError::invalid("ragged matrix rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y` without materializing the transpose.
    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out[(r, c)] += a * other[(k, c)];
                }
            }
        }
        out
    }

    /// `self · selfᵀ`.
    pub fn gram_rows(&self) -> Matrix {
        let n = self.rows;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigen-decomposition `A = Q Λ Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector of `values[i]`.
    pub vectors: Matrix,
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if a.rows != a.cols {
        return Err(LcoError::invalid(format!(
            "matrix is {}x{}, not square",
            a.rows, a.cols
        )));
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE {
        return Err(LcoError::invalid(format!(
            "matrix not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }
    Ok(())
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops
/// below 1e-12 (or round-off level for large-norm matrices).
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    check_symmetric(a)?;
    let n = a.rows;
    let mut m = a.clone();
    // symmetrize exactly so rotations see one consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut q = Matrix::identity(n);
    let scale = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = 1e-12_f64.max(scale * n as f64 * f64::EPSILON);

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off < threshold {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = m[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let arr = m[(r, r)];
                let theta = (arr - app) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkr = m[(k, r)];
                    m[(k, p)] = c * mkp - s * mkr;
                    m[(k, r)] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mrk = m[(r, k)];
                    m[(p, k)] = c * mpk - s * mrk;
                    m[(r, k)] = s * mpk + c * mrk;
                }
                m[(p, r)] = 0.0;
                m[(r, p)] = 0.0;
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| q[(r, order[c])]);
    Ok(SymmetricEigen { values, vectors })
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows {
        for j in 0..m.cols {
            if i != j {
                s += m[(i, j)] * m[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(h: &Matrix) -> Result<f64> {
    Ok(symmetric_eigen(h)?.values[0])
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration on the Rayleigh quotient, stopping at 1e-10 relative change.
pub fn power_iteration(a: &Matrix) -> Result<f64> {
    check_symmetric(a)?;
    let n = a.rows;
    if n == 0 {
        return Ok(0.0);
    }
    // Fixed, non-degenerate start vector.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64)
        .collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut lambda = a.quadratic_form(&v);
    const MAX_ITERS: usize = 100_000;
    let mut stable = 0;
    for _ in 0..MAX_ITERS {
        let w = a.matvec(&v);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / nw).collect();
        let next = a.quadratic_form(&v);
        let change = (next - lambda).abs();
        lambda = next;
        // Rayleigh quotients approach λ_max from below; require several
        // consecutive quiet iterations before trusting convergence.
        if change <= 1e-10 * lambda.abs().max(f64::MIN_POSITIVE) * 1e-4 {
            stable += 1;
            if stable >= 3 {
                break;
            }
        } else {
            stable = 0;
        }
    }
    Ok(lambda)
}

/// Minimum-norm least-squares solution of `J θ = y` via the eigen-decomposition
/// of `J Jᵀ` (pseudo-inverse, tiny eigenvalues dropped).
pub fn min_norm_solve(j: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != j.rows {
        return Err(LcoError::invalid(
            "right-hand side length does not match Jacobian rows",
        ));
    }
    let eig = symmetric_eigen(&j.gram_rows())?;
    let top = eig.values.iter().copied().fold(0.0, f64::max);
    let cutoff = top * 1e-12;
    let n = j.rows;
    // u = (J Jᵀ)⁺ y
    let mut u = vec![0.0; n];
    for (c, &lambda) in eig.values.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|r| eig.vectors[(r, c)]).collect();
        let coef = dot(&col, y) / lambda;
        for (ui, ci) in u.iter_mut().zip(&col) {
            *ui += coef * ci;
        }
    }
    Ok(j.tmatvec(&u))
}
