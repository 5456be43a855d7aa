//! Riccati equations of the limiting tracking problem.
//!
//! * the stochastic algebraic Riccati equation (SARE)
//!   `ρP = AᵀP + PA + CᵀPC + Q - (BᵀP + DᵀPC)ᵀ(R + DᵀPD)⁻¹(BᵀP + DᵀPC)`,
//!   solved by Newton–Kleinman iteration on generalized Lyapunov equations;
//! * its closed form for the scalar noisy integrator, `ρp = 1 - p²/(r + p)`;
//! * the deterministic Riccati equation that decouples the uniform-agent
//!   consistency system, solved from the stable invariant subspace of a
//!   Hamiltonian matrix.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Mat, Vector};
use crate::stability::{self, ControlledNoisySystem, LinearNoisySystem, Stabilizability};

/// Matrices and scalars of one agent class and its discounted cost.
#[derive(Debug, Clone, PartialEq)]
pub struct GameParameters {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub q: Mat,
    pub r: Mat,
    pub rho: f64,
    pub x0_mean: Vector,
}

impl GameParameters {
    #[allow(clippy::too_many_arguments)]
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat, q: Mat, r: Mat, rho: f64, x0_mean: Vector) -> Result<Self> {
        let params = Self {
            a,
            b,
            c,
            d,
            q,
            r,
            rho,
            x0_mean,
        };
        params.validate()?;
        Ok(params)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn scalar(a: f64, b: f64, c: f64, d: f64, q: f64, r: f64, rho: f64, x0: f64) -> Self {
        let m = |x| Mat::from_element(1, 1, x);
        Self {
            a: m(a),
            b: m(b),
            c: m(c),
            d: m(d),
            q: m(q),
            r: m(r),
            rho,
            x0_mean: Vector::from_element(1, x0),
        }
    }

    /// `dx = u dt + u dW` with cost weights `Q = 1`, `R = r`.
    pub fn integrator(rho: f64, r: f64, x0: f64) -> Self {
        Self::scalar(0.0, 1.0, 0.0, 1.0, 1.0, r, rho, x0)
    }

    /// `dx = B u dt + D u dW` with `Q = I`.
    pub fn multiple_integrator(b: Mat, d: Mat, r: Mat, rho: f64, x0_mean: Vector) -> Result<Self> {
        let n = b.nrows();
        Self::new(
            Mat::zeros(n, n),
            b,
            Mat::zeros(n, n),
            d,
            Mat::identity(n, n),
            r,
            rho,
            x0_mean,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let r = self.b.ncols();
        let dims_ok = n > 0
            && self.a.is_square()
            && self.b.nrows() == n
            && r > 0
            && self.c.shape() == (n, n)
            && self.d.shape() == (n, r)
            && self.q.shape() == (n, n)
            && self.r.shape() == (r, r)
            && self.x0_mean.len() == n;
        if !dims_ok {
            return Err(Error::Dimension(format!(
                "expected A {n}x{n}, B {n}x{r}, C {n}x{n}, D {n}x{r}, Q {n}x{n}, R {r}x{r}, x0 of length {n}"
            )));
        }
        if !linalg::is_symmetric(&self.q, 1e-12) {
            return Err(Error::NotSymmetric("Q"));
        }
        if !linalg::is_symmetric(&self.r, 1e-12) {
            return Err(Error::NotSymmetric("R"));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("must be finite and nonnegative, got {}", self.rho),
            });
        }
        Ok(())
    }

    pub fn system(&self) -> Result<ControlledNoisySystem> {
        ControlledNoisySystem::new(self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone())
    }

    /// `A = C = 0`: the noisy (multiple) integrator family.
    pub fn is_integrator(&self) -> bool {
        self.a.amax() == 0.0 && self.c.amax() == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SareOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Solution of the SARE with the induced feedback data.
#[derive(Debug, Clone, PartialEq)]
pub struct SareSolution {
    pub p: Mat,
    /// `G = (R + DᵀPD)⁻¹(BᵀP + DᵀPC)`; the optimal feedback is `u = -G x - ...`.
    pub gain: Mat,
    /// `R + DᵀPD`
    pub r_eff: Mat,
    /// `Ā = A - B G`
    pub a_cl: Mat,
    /// `C̄ = C - D G`
    pub c_cl: Mat,
    pub residual: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Exact detectability of `[A - (ρ/2)I, C, √Q]`. When false the solution
    /// is still returned but uniqueness is not guaranteed.
    pub detectable: bool,
}

/// Frobenius norm of the SARE defect at `p`.
pub fn sare_residual(params: &GameParameters, p: &Mat) -> Result<f64> {
    let (gain, _) = feedback_from(params, p)?;
    let cross = params.b.transpose() * p + params.d.transpose() * p * &params.c;
    let rhs = params.a.transpose() * p + p * &params.a + params.c.transpose() * p * &params.c + &params.q
        - cross.transpose() * &gain;
    Ok((p * params.rho - rhs).norm())
}

fn feedback_from(params: &GameParameters, p: &Mat) -> Result<(Mat, Mat)> {
    let r_eff = linalg::symmetrize(&(&params.r + params.d.transpose() * p * &params.d));
    let cross = params.b.transpose() * p + params.d.transpose() * p * &params.c;
    let gain = linalg::solve(&r_eff, &cross, "R + D'PD")?;
    Ok((gain, r_eff))
}

/// Solves `Fᵀ P + P F + C_kᵀ P C_k + W = 0` with `F = A_k - (ρ/2) I`.
fn generalized_lyapunov(a_k: &Mat, c_k: &Mat, w: &Mat, rho: f64) -> Result<Mat> {
    let n = a_k.nrows();
    let op = stability::mean_square_operator(a_k, c_k, rho / 2.0);
    let rhs = -linalg::vec_of(w);
    let p = op
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("generalized Lyapunov operator"))?;
    Ok(linalg::symmetrize(&linalg::unvec(&p, n, n)))
}

struct NewtonOutcome {
    p: Mat,
    gain: Mat,
    r_eff: Mat,
    residual: f64,
    history: Vec<f64>,
}

/// Newton–Kleinman iteration from a stabilizing `u = K₀ x`.
fn newton_kleinman(params: &GameParameters, k0: &Mat, opts: SareOptions) -> Result<NewtonOutcome> {
    let mut k = k0.clone();
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let a_k = &params.a + &params.b * &k;
        let c_k = &params.c + &params.d * &k;
        let w = &params.q + k.transpose() * &params.r * &k;
        let p = generalized_lyapunov(&a_k, &c_k, &w, params.rho)?;
        let r_eff = linalg::symmetrize(&(&params.r + params.d.transpose() * &p * &params.d));
        if !linalg::is_positive_definite(&r_eff) {
            return Err(Error::IndefiniteWeight { iteration: it });
        }
        let (gain, r_eff) = feedback_from(params, &p)?;
        let residual = sare_residual(params, &p)?;
        history.push(residual);
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            return Ok(NewtonOutcome {
                p,
                gain,
                r_eff,
                residual,
                history,
            });
        }
        k = -gain;
    }
    Err(Error::NotConverged {
        what: "Newton-Kleinman iteration",
        iterations: history.len(),
        residual: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// Constructive ρ-stabilizability: Newton–Kleinman with `Q = I`, `R = I`,
/// preceded by a continuation in a drift shift `A - σI` when `u = 0` is not
/// already stabilizing. The shift is lowered while the optimal closed loop
/// of the shifted problem keeps a margin; a stalled continuation means the
/// unshifted system cannot be stabilized.
pub(crate) fn stabilizing_gain(sys: &ControlledNoisySystem, rho: f64) -> Result<Stabilizability> {
    let n = sys.state_dim();
    let r = sys.control_dim();
    let mut params = GameParameters {
        a: sys.a().clone(),
        b: sys.b().clone(),
        c: sys.c().clone(),
        d: sys.d().clone(),
        q: Mat::identity(n, n),
        r: Mat::identity(r, r),
        rho,
        x0_mean: Vector::zeros(n),
    };
    let opts = SareOptions {
        tol: 1e-11,
        max_iter: 200,
    };
    let base = stability::mean_square_operator(sys.a(), sys.c(), rho / 2.0);
    let open_abscissa = linalg::spectral_abscissa(&base);

    let mut sigma = if open_abscissa < -stability::EIGEN_TOL {
        0.0
    } else {
        (open_abscissa + 1.0) / 2.0
    };
    let mut k = Mat::zeros(r, n);
    for _ in 0..10_000 {
        params.a = sys.a() - Mat::identity(n, n) * sigma;
        let outcome = match newton_kleinman(&params, &k, opts) {
            Ok(o) => o,
            Err(e) => {
                return Ok(Stabilizability::Undetermined {
                    reason: format!("Riccati solve failed at shift {sigma:e}: {e}"),
                })
            }
        };
        k = -outcome.gain;
        if sigma == 0.0 {
            return Ok(Stabilizability::Stabilizable { gain: k });
        }
        if outcome.p.amax() > 1e12 {
            return Ok(Stabilizability::NotStabilizable);
        }
        let cl = sys.closed_loop(&k)?;
        let margin = -linalg::spectral_abscissa(&stability::mean_square_operator(
            cl.a(),
            cl.c(),
            rho / 2.0 + sigma,
        ));
        let step = 0.45 * margin;
        if step < 1e-9 * sigma.max(1.0) {
            return Ok(Stabilizability::NotStabilizable);
        }
        sigma = (sigma - step).max(0.0);
    }
    Ok(Stabilizability::Undetermined {
        reason: "shift continuation did not terminate".into(),
    })
}

/// Solves the SARE by Newton–Kleinman iteration.
///
/// The initial gain is `0` when `[A, C]` is already ρ-stable and otherwise
/// the constructive gain of [`stability::is_rho_stabilizable`]. Indefinite
/// `R` is accepted as long as `R + DᵀPD` stays positive definite.
pub fn solve_sare(params: &GameParameters, opts: SareOptions) -> Result<SareSolution> {
    params.validate()?;
    let sys = params.system()?;
    let n = params.state_dim();
    let r = params.control_dim();

    let open = stability::is_rho_stable(&LinearNoisySystem::new(params.a.clone(), params.c.clone())?, params.rho)?;
    let k0 = if open.stable {
        Mat::zeros(r, n)
    } else {
        match stability::is_rho_stabilizable(&sys, params.rho)? {
            Stabilizability::Stabilizable { gain } => gain,
            Stabilizability::NotStabilizable => {
                return Err(Error::NoStabilizingGain("system is not rho-stabilizable".into()))
            }
            Stabilizability::Undetermined { reason } => return Err(Error::NoStabilizingGain(reason)),
        }
    };

    let out = newton_kleinman(params, &k0, opts)?;
    let a_cl = &params.a - &params.b * &out.gain;
    let c_cl = &params.c - &params.d * &out.gain;
    let cl = stability::is_rho_stable(&LinearNoisySystem::new(a_cl.clone(), c_cl.clone())?, params.rho)?;
    if !cl.stable {
        return Err(Error::Precondition(format!(
            "Riccati closed loop is not rho-stable (abscissa {:e})",
            cl.spectral_abscissa
        )));
    }

    if n == 1 && r == 1 {
        if let Some(root) = scalar_sare_max_root(params) {
            let solver = out.p[(0, 0)];
            if (solver - root).abs() > 1e-8 * root.abs().max(1.0) {
                return Err(Error::RootMismatch { solver, root });
            }
        }
    }

    let detectable = linalg::symmetrize(&params.q).symmetric_eigenvalues().min() >= -1e-12
        && stability::is_exactly_detectable(&params.a, &params.c, &params.q, params.rho)?;

    Ok(SareSolution {
        iterations: out.history.len(),
        residual: out.residual,
        residual_history: out.history,
        p: out.p,
        gain: out.gain,
        r_eff: out.r_eff,
        a_cl,
        c_cl,
        detectable,
    })
}

/// Maximal real root of the scalar SARE with `R + D²p > 0`.
///
/// Clearing the denominator gives
/// `(α D² + (B + DC)²) p² + (α R - Q D²) p - Q R = 0` with `α = ρ - 2A - C²`.
pub fn scalar_sare_max_root(params: &GameParameters) -> Option<f64> {
    if params.state_dim() != 1 || params.control_dim() != 1 {
        return None;
    }
    let (a, b, c, d) = (params.a[(0, 0)], params.b[(0, 0)], params.c[(0, 0)], params.d[(0, 0)]);
    let (q, r, rho) = (params.q[(0, 0)], params.r[(0, 0)], params.rho);
    let alpha = rho - 2.0 * a - c * c;
    let qa = alpha * d * d + (b + d * c).powi(2);
    let qb = alpha * r - q * d * d;
    let qc = -q * r;
    let mut roots = Vec::new();
    if qa.abs() < 1e-14 {
        if qb.abs() > 1e-14 {
            roots.push(-qc / qb);
        }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        roots.push((-qb + sq) / (2.0 * qa));
        roots.push((-qb - sq) / (2.0 * qa));
    }
    roots
        .into_iter()
        .filter(|p| r + d * d * p > 0.0)
        .fold(None, |best: Option<f64>, p| Some(best.map_or(p, |m| m.max(p))))
}

/// `(2√(ρ+1) - (ρ+2)) / ρ²`, written in the cancellation-free form
/// `-1 / (2√(ρ+1) + ρ + 2)`. Above it the scalar integrator problem is convex.
pub fn convexity_threshold(rho: f64) -> f64 {
    -1.0 / (2.0 * (rho + 1.0).sqrt() + rho + 2.0)
}

/// `-1 / (2(2+ρ))`. Above it the integrator agents reach mean-square consensus.
pub fn consensus_threshold(rho: f64) -> f64 {
    -1.0 / (2.0 * (2.0 + rho))
}

/// Closed-form SARE root for `dx = u dt + u dW`, `Q = 1`, `R = r`:
/// returns `(p, Δ)` with `Δ = (ρr)² + 2ρr + 4r + 1` and
/// `p = (1 - ρr + √Δ) / (2(ρ+1))`.
pub fn solve_scalar_integrator_p(rho: f64, r: f64) -> Result<(f64, f64)> {
    if !(rho >= 0.0) || !rho.is_finite() || !r.is_finite() {
        return Err(Error::InvalidParameter {
            name: "rho",
            reason: format!("need finite rho >= 0 and finite r, got rho={rho}, r={r}"),
        });
    }
    let threshold = convexity_threshold(rho);
    if r <= threshold {
        return Err(Error::Precondition(format!(
            "r = {r} is not above the convexity threshold {threshold}"
        )));
    }
    let delta = (rho * r).powi(2) + 2.0 * rho * r + 4.0 * r + 1.0;
    if delta <= 0.0 {
        return Err(Error::Precondition(format!("Delta = {delta} is not positive")));
    }
    let p = (1.0 - rho * r + delta.sqrt()) / (2.0 * (rho + 1.0));
    if p + r <= 0.0 {
        return Err(Error::Precondition(format!("p + r = {} is not positive", p + r)));
    }
    Ok((p, delta))
}

/// Residual `ρp - 1 + p²/(r + p)` of the scalar integrator equation.
pub fn scalar_integrator_residual(rho: f64, r: f64, p: f64) -> f64 {
    rho * p - 1.0 + p * p / (r + p)
}

/// The Hamiltonian matrix of the decoupling Riccati equation with its spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub m: Mat,
    pub eigenvalues: Vec<Complex64>,
    pub admissible: bool,
}

/// `M = [[Ā - (ρ/2)I, B R_eff⁻¹ Bᵀ], [-Q, -Āᵀ + (ρ/2)I]]`; admissible when no
/// eigenvalue lies on the imaginary axis.
pub fn hamiltonian_matrix(a_cl: &Mat, b: &Mat, r_eff: &Mat, q: &Mat, rho: f64) -> Result<Hamiltonian> {
    let n = a_cl.nrows();
    if !a_cl.is_square() || b.nrows() != n || r_eff.shape() != (b.ncols(), b.ncols()) || q.shape() != (n, n) {
        return Err(Error::Dimension("Hamiltonian blocks are not conformable".into()));
    }
    let f = a_cl - Mat::identity(n, n) * (rho / 2.0);
    let s = b * linalg::solve(r_eff, &b.transpose(), "R_eff")?;
    let mut m = Mat::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&f);
    m.view_mut((0, n), (n, n)).copy_from(&s);
    m.view_mut((n, 0), (n, n)).copy_from(&(-q));
    m.view_mut((n, n), (n, n)).copy_from(&(-f.transpose()));
    let eigenvalues = linalg::eigenvalues(&m);
    let scale = m.amax().max(1.0);
    let min_re = eigenvalues.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
    Ok(Hamiltonian {
        admissible: min_re > 1e-9 * scale,
        m,
        eigenvalues,
    })
}

/// Stabilizing solution `K` of
/// `K F + Fᵀ K - K B R_eff⁻¹ Bᵀ K - Q = 0`, `F = Ā - (ρ/2)I`,
/// i.e. the one with `F - B R_eff⁻¹ Bᵀ K` Hurwitz.
pub fn solve_gain_riccati(a_cl: &Mat, b: &Mat, r_eff: &Mat, q: &Mat, rho: f64) -> Result<Mat> {
    let n = a_cl.nrows();
    let ham = hamiltonian_matrix(a_cl, b, r_eff, q, rho)?;
    if !ham.admissible {
        let min_re = ham.eigenvalues.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
        return Err(Error::ImaginaryAxisEigenvalue(min_re));
    }
    let (z, _t, k) = linalg::ordered_schur(&ham.m, |l| l.re < 0.0)?;
    if k != n {
        return Err(Error::Precondition(format!(
            "Hamiltonian has {k} stable eigenvalues, expected {n}"
        )));
    }
    let z11: CMat = z.view((0, 0), (n, n)).into_owned();
    let z21: CMat = z.view((n, 0), (n, n)).into_owned();
    // X = Z21 Z11⁻¹  <=>  Z11ᵀ Xᵀ = Z21ᵀ
    let xt = z11
        .transpose()
        .lu()
        .solve(&z21.transpose())
        .ok_or(Error::Singular("stable subspace basis"))?;
    let x = xt.transpose();
    let imag = x.map(|v| v.im).amax();
    let real = x.map(|v| v.re);
    if imag > 1e-8 * real.amax().max(1.0) {
        return Err(Error::Singular("stable subspace basis (complex solution)"));
    }
    let k_sol = -linalg::symmetrize(&real);

    let s = b * linalg::solve(r_eff, &b.transpose(), "R_eff")?;
    let closed = a_cl - Mat::identity(n, n) * (rho / 2.0) - &s * &k_sol;
    if !linalg::is_hurwitz(&closed, 0.0) {
        return Err(Error::Precondition("decoupled mean dynamics are not Hurwitz".into()));
    }
    Ok(k_sol)
}

/// Frobenius defect of the decoupling Riccati equation at `k`.
pub fn gain_riccati_residual(a_cl: &Mat, b: &Mat, r_eff: &Mat, q: &Mat, rho: f64, k: &Mat) -> Result<f64> {
    let n = a_cl.nrows();
    let f = a_cl - Mat::identity(n, n) * (rho / 2.0);
    let s = b * linalg::solve(r_eff, &b.transpose(), "R_eff")?;
    Ok((k * &f + f.transpose() * k - k * &s * k - q).norm())
}
