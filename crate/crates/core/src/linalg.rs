//! Dense linear-algebra helpers shared by the solvers.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Vectorization is column-major,
//! so `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMat = DMatrix<Complex64>;

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn vec_of(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale
}

/// Solves `A X = B` by LU with partial pivoting.
pub fn solve(a: &Mat, b: &Mat, context: &'static str) -> Result<Mat> {
    let lu = a.clone().lu();
    lu.solve(b).ok_or(Error::Singular(context))
}

pub fn inverse(a: &Mat, context: &'static str) -> Result<Mat> {
    a.clone().try_inverse().ok_or(Error::Singular(context))
}

/// True when the symmetric part of `m` admits a Cholesky factorization.
pub fn is_positive_definite(m: &Mat) -> bool {
    symmetrize(m).cholesky().is_some()
}

pub fn eigenvalues(m: &Mat) -> Vec<Complex64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_abscissa(m: &Mat) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &Mat, tol: f64) -> bool {
    spectral_abscissa(m) < -tol
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Complex Schur form `M = Z T Zᴴ` with the eigenvalues satisfying `select`
/// moved to the leading diagonal positions. Returns `(Z, T, k)` where `k`
/// counts the selected eigenvalues.
pub fn ordered_schur(m: &Mat, select: impl Fn(Complex64) -> bool) -> Result<(CMat, CMat, usize)> {
    let n = m.nrows();
    let schur = Schur::try_new(to_complex(m), f64::EPSILON, 10_000)
        .ok_or(Error::NotConverged {
            what: "Schur decomposition",
            iterations: 10_000,
            residual: f64::NAN,
        })?;
    let (mut z, mut t) = schur.unpack();
    // flush below-diagonal round-off so T is exactly triangular
    for j in 0..n {
        for i in (j + 1)..n {
            t[(i, j)] = Complex64::new(0.0, 0.0);
        }
    }

    let mut placed = 0;
    for j in 0..n {
        if select(t[(j, j)]) {
            let mut pos = j;
            while pos > placed {
                swap_adjacent(&mut z, &mut t, pos - 1);
                pos -= 1;
            }
            placed += 1;
        }
    }
    Ok((z, t, placed))
}

/// Exchanges the diagonal entries `k` and `k + 1` of the triangular `t`
/// with a unitary rotation, updating `z` so that `Z T Zᴴ` is preserved.
fn swap_adjacent(z: &mut CMat, t: &mut CMat, k: usize) {
    let n = t.nrows();
    let t11 = t[(k, k)];
    let t22 = t[(k + 1, k + 1)];
    let t12 = t[(k, k + 1)];
    // eigenvector of the 2x2 block for t22
    let v1 = t12;
    let v2 = t22 - t11;
    let norm = (v1.norm_sqr() + v2.norm_sqr()).sqrt();
    if norm == 0.0 {
        return;
    }
    let a = v1 / norm;
    let b = v2 / norm;
    // U = [[a, -conj(b)], [b, conj(a)]]
    let u11 = a;
    let u12 = -b.conj();
    let u21 = b;
    let u22 = a.conj();

    // T <- Uᴴ T on rows k, k+1
    for j in 0..n {
        let x = t[(k, j)];
        let y = t[(k + 1, j)];
        t[(k, j)] = u11.conj() * x + u21.conj() * y;
        t[(k + 1, j)] = u12.conj() * x + u22.conj() * y;
    }
    // T <- T U on columns k, k+1; Z <- Z U
    for i in 0..n {
        let x = t[(i, k)];
        let y = t[(i, k + 1)];
        t[(i, k)] = x * u11 + y * u21;
        t[(i, k + 1)] = x * u12 + y * u22;
        let x = z[(i, k)];
        let y = z[(i, k + 1)];
        z[(i, k)] = x * u11 + y * u21;
        z[(i, k + 1)] = x * u12 + y * u22;
    }
    t[(k + 1, k)] = Complex64::new(0.0, 0.0);
    t[(k, k)] = t22;
    t[(k + 1, k + 1)] = t11;
}

/// Orthonormal basis of the symmetric `n×n` matrices, returned as the
/// `n² × n(n+1)/2` matrix whose columns are `vec(E_ij)`.
pub fn symmetric_basis(n: usize) -> Mat {
    let dim = n * (n + 1) / 2;
    let mut basis = Mat::zeros(n * n, dim);
    let mut col = 0;
    for j in 0..n {
        for i in j..n {
            if i == j {
                basis[(i + j * n, col)] = 1.0;
            } else {
                let w = std::f64::consts::FRAC_1_SQRT_2;
                basis[(i + j * n, col)] = w;
                basis[(j + i * n, col)] = w;
            }
            col += 1;
        }
    }
    basis
}

/// Smallest singular value of a complex matrix with at least as many rows as columns.
pub fn min_singular_value(m: &CMat) -> f64 {
    if m.ncols() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
