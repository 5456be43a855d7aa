//! Mean-square stability analysis for linear SDEs with multiplicative noise.
//!
//! For `dx = A x dt + C x dW` the second moment `X(t) = E[x xᵀ]` evolves by
//! the linear operator `L(X) = A X + X Aᵀ + C X Cᵀ`. Discounting by `e^{-ρt}`
//! shifts the drift to `A - (ρ/2) I`, so ρ-stability is decided by the
//! spectrum of the `n² × n²` matrix
//! `(I ⊗ F) + (F ⊗ I) + (C ⊗ C)` with `F = A - (ρ/2) I`.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Mat};
use crate::riccati;

/// Real-part threshold below which an operator eigenvalue counts as stable.
pub const EIGEN_TOL: f64 = 1e-10;
/// Relative threshold for the `Q Z = 0` kernel test of exact detectability.
pub const KERNEL_TOL: f64 = 1e-8;

/// The uncontrolled pair `[A, C]` of `dx = A x dt + C x dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNoisySystem {
    a: Mat,
    c: Mat,
}

impl LinearNoisySystem {
    pub fn new(a: Mat, c: Mat) -> Result<Self> {
        if a.nrows() == 0 || !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if c.shape() != a.shape() {
            return Err(Error::Dimension(format!(
                "C must be {}x{}, got {}x{}",
                a.nrows(),
                a.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(Self { a, c })
    }

    pub fn scalar(a: f64, c: f64) -> Self {
        Self {
            a: Mat::from_element(1, 1, a),
            c: Mat::from_element(1, 1, c),
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// `dx = (A x + B u) dt + (C x + D u) dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledNoisySystem {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
}

impl ControlledNoisySystem {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension("A must be square and non-empty".into()));
        }
        let r = b.ncols();
        if b.nrows() != n || r == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xr with r >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.shape() != (n, n) {
            return Err(Error::Dimension(format!("C must be {n}x{n}")));
        }
        if d.shape() != (n, r) {
            return Err(Error::Dimension(format!("D must be {n}x{r}")));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn d(&self) -> &Mat {
        &self.d
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Closed loop `[A + B K, C + D K]` under `u = K x`.
    pub fn closed_loop(&self, gain: &Mat) -> Result<LinearNoisySystem> {
        if gain.shape() != (self.control_dim(), self.state_dim()) {
            return Err(Error::Dimension(format!(
                "gain must be {}x{}",
                self.control_dim(),
                self.state_dim()
            )));
        }
        LinearNoisySystem::new(&self.a + &self.b * gain, &self.c + &self.d * gain)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub stable: bool,
    /// Largest real part of the (ρ-shifted) mean-square operator spectrum.
    pub spectral_abscissa: f64,
    /// `X > 0` with `Fᵀ X + X F + Cᵀ X C = -I`, present when stable.
    pub certificate: Option<Mat>,
    pub certificate_residual: Option<f64>,
}

/// Matrix of `X ↦ (A - shift I) X + X (A - shift I)ᵀ + C X Cᵀ` acting on `vec(X)`.
pub fn mean_square_operator(a: &Mat, c: &Mat, shift: f64) -> Mat {
    let n = a.nrows();
    let f = a - Mat::identity(n, n) * shift;
    let id = Mat::identity(n, n);
    linalg::kron(&id, &f) + linalg::kron(&f, &id) + linalg::kron(c, c)
}

pub fn is_rho_stable(sys: &LinearNoisySystem, rho: f64) -> Result<StabilityReport> {
    check_rho(rho)?;
    let n = sys.dim();
    let op = mean_square_operator(&sys.a, &sys.c, rho / 2.0);
    let abscissa = linalg::spectral_abscissa(&op);
    let stable = abscissa < -EIGEN_TOL;
    if !stable {
        return Ok(StabilityReport {
            stable,
            spectral_abscissa: abscissa,
            certificate: None,
            certificate_residual: None,
        });
    }

    // adjoint operator: vec(Fᵀ X + X F + Cᵀ X C) = opᵀ vec(X)
    let rhs = -linalg::vec_of(&Mat::identity(n, n));
    let x = op
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("Lyapunov certificate"))?;
    let x = linalg::symmetrize(&linalg::unvec(&x, n, n));
    let f = &sys.a - Mat::identity(n, n) * (rho / 2.0);
    let defect = f.transpose() * &x + &x * &f + sys.c.transpose() * &x * &sys.c + Mat::identity(n, n);
    Ok(StabilityReport {
        stable,
        spectral_abscissa: abscissa,
        certificate: Some(x),
        certificate_residual: Some(defect.norm()),
    })
}

/// Outcome of the constructive ρ-stabilizability test.
#[derive(Debug, Clone, PartialEq)]
pub enum Stabilizability {
    /// A gain `K` with `[A + B K, C + D K]` ρ-stable.
    Stabilizable { gain: Mat },
    NotStabilizable,
    /// The Riccati machinery failed before reaching a verdict.
    Undetermined { reason: String },
}

impl Stabilizability {
    pub fn is_stabilizable(&self) -> bool {
        matches!(self, Stabilizability::Stabilizable { .. })
    }

    pub fn gain(&self) -> Option<&Mat> {
        match self {
            Stabilizability::Stabilizable { gain } => Some(gain),
            _ => None,
        }
    }
}

/// Decides ρ-stabilizability through the Riccati equation with `Q = I, R = I`.
///
/// The returned gain is `K = -(R + DᵀPD)⁻¹(BᵀP + DᵀPC)` and is verified to
/// pass [`is_rho_stable`] on the closed loop.
pub fn is_rho_stabilizable(sys: &ControlledNoisySystem, rho: f64) -> Result<Stabilizability> {
    check_rho(rho)?;
    let outcome = riccati::stabilizing_gain(sys, rho)?;
    if let Stabilizability::Stabilizable { gain } = &outcome {
        let report = is_rho_stable(&sys.closed_loop(gain)?, rho)?;
        if !report.stable {
            return Ok(Stabilizability::Undetermined {
                reason: format!(
                    "Riccati gain failed the closed-loop check (abscissa {:e})",
                    report.spectral_abscissa
                ),
            });
        }
    }
    Ok(outcome)
}

/// Exact detectability of `[A - (ρ/2) I, C, √Q]`: no symmetric `Z ≠ 0` with
/// `F Z + Z Fᵀ + C Z Cᵀ = λ Z`, `Re λ ≥ 0` and `Q Z = 0`.
pub fn is_exactly_detectable(a: &Mat, c: &Mat, q: &Mat, rho: f64) -> Result<bool> {
    is_exactly_detectable_with_tol(a, c, q, rho, KERNEL_TOL)
}

pub fn is_exactly_detectable_with_tol(a: &Mat, c: &Mat, q: &Mat, rho: f64, tol: f64) -> Result<bool> {
    check_rho(rho)?;
    let sys = LinearNoisySystem::new(a.clone(), c.clone())?;
    let n = sys.dim();
    if q.shape() != (n, n) {
        return Err(Error::Dimension(format!("Q must be {n}x{n}")));
    }
    if !linalg::is_symmetric(q, 1e-12) {
        return Err(Error::NotSymmetric("Q"));
    }

    let basis = linalg::symmetric_basis(n);
    let op = mean_square_operator(a, c, rho / 2.0);
    // restriction to the symmetric subspace (the basis is orthonormal)
    let op_sym = basis.transpose() * &op * &basis;
    let q_map = linalg::kron(&Mat::identity(n, n), q) * &basis;
    let dim = op_sym.nrows();
    let scale = op_sym.amax().max(q_map.amax()).max(1.0);

    for lambda in linalg::eigenvalues(&op_sym) {
        if lambda.re < -EIGEN_TOL {
            continue;
        }
        // Z in ker(L - λ) ∩ ker(Q ·) iff the stacked map has a null vector
        let mut stacked = CMat::zeros(dim + n * n, dim);
        for j in 0..dim {
            for i in 0..dim {
                let mut v = Complex64::new(op_sym[(i, j)], 0.0);
                if i == j {
                    v -= lambda;
                }
                stacked[(i, j)] = v;
            }
            for i in 0..n * n {
                stacked[(dim + i, j)] = Complex64::new(q_map[(i, j)], 0.0);
            }
        }
        if linalg::min_singular_value(&stacked) <= tol * scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `E‖x(t)‖²` on the given times for `dx = A x dt + C x dW`, `E x(0)x(0)ᵀ = Σ₀`,
/// propagated exactly through the (unshifted) mean-square operator.
pub fn second_moment_trace(sys: &LinearNoisySystem, sigma0: &Mat, times: &[f64]) -> Result<Vec<f64>> {
    let n = sys.dim();
    if sigma0.shape() != (n, n) {
        return Err(Error::Dimension(format!("Σ₀ must be {n}x{n}")));
    }
    let op = mean_square_operator(&sys.a, &sys.c, 0.0);
    let v0 = linalg::vec_of(sigma0);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let v: DVector<f64> = (&op * t).exp() * &v0;
        let m = linalg::unvec(&v, n, n);
        out.push(m.trace());
    }
    Ok(out)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::InvalidParameter {
            name: "rho",
            reason: format!("must be finite and nonnegative, got {rho}"),
        });
    }
    Ok(())
}
