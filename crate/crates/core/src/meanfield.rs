//! Consistency equations of the mean field limit and the decentralized
//! strategies built from them.
//!
//! Paths live on a uniform [`TimeGrid`] and are stored as `n × (M+1)`
//! matrices whose columns are the grid nodes. All ODEs are integrated with
//! the classical fourth-order Runge–Kutta scheme; forcing terms known only
//! on the nodes are evaluated at midpoints by cubic interpolation so the
//! scheme keeps its order.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::riccati::{self, GameParameters, SareOptions, SareSolution};

/// Columns are grid nodes.
pub type Path = Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// Uniform grid on `[0, horizon]`. The step is shrunk so that it divides
    /// the horizon exactly.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter {
                name: "horizon",
                reason: format!("must be positive, got {horizon}"),
            });
        }
        if !(dt > 0.0) || !dt.is_finite() || dt > horizon {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must lie in (0, horizon], got {dt}"),
            });
        }
        let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            horizon,
            dt: horizon / steps as f64,
            steps,
        })
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                reason: "need at least one step".into(),
            });
        }
        Self::new(horizon, horizon / steps as f64)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }

    /// Same horizon and step count as `other`.
    pub fn matches(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon
    }

    /// Trapezoid weights of `∫₀ᵀ e^{-ρt} f(t) dt`.
    pub fn discounted_weights(&self, rho: f64) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let end = k == 0 || k == self.steps;
                let w = if end { 0.5 * self.dt } else { self.dt };
                w * (-rho * self.t(k)).exp()
            })
            .collect()
    }

    /// `∫₀ᵀ e^{-ρt} ‖x(t)‖² dt` by the trapezoid rule.
    pub fn discounted_sq_norm(&self, path: &Path, rho: f64) -> Result<f64> {
        self.check_path(path)?;
        Ok(self
            .discounted_weights(rho)
            .iter()
            .enumerate()
            .map(|(k, w)| w * path.column(k).norm_squared())
            .sum())
    }

    fn check_path(&self, path: &Path) -> Result<()> {
        if path.ncols() != self.len() {
            return Err(Error::GridMismatch(format!(
                "path has {} nodes, grid has {}",
                path.ncols(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Value of a node-sampled path at the midpoint of interval `k` by cubic
/// Lagrange interpolation (one-sided stencils at the ends).
pub fn midpoint(path: &Path, k: usize) -> Vector {
    let m = path.ncols() - 1;
    let c = |j: usize| path.column(j).into_owned();
    if m < 3 {
        return (c(k) + c(k + 1)) * 0.5;
    }
    if k == 0 {
        (c(0) * 5.0 + c(1) * 15.0 - c(2) * 5.0 + c(3)) / 16.0
    } else if k == m - 1 {
        (c(m - 3) - c(m - 2) * 5.0 + c(m - 1) * 15.0 + c(m) * 5.0) / 16.0
    } else {
        (c(k) * 9.0 + c(k + 1) * 9.0 - c(k - 1) - c(k + 2)) / 16.0
    }
}

/// Integrates `y' = L y + f(t)` over the grid, forward from `y(0) = y0` or
/// backward from `y(T) = y0`.
fn rk4_linear(l: &Mat, forcing: &Path, y0: Vector, grid: &TimeGrid, backward: bool) -> Path {
    let n = y0.len();
    let m = grid.steps();
    let mut out = Path::zeros(n, m + 1);
    let mut y = y0;
    let f = |y: &Vector, g: &Vector| l * y + g;
    let order: Vec<usize> = if backward { (0..m).rev().collect() } else { (0..m).collect() };
    let (start, h) = if backward { (m, -grid.dt()) } else { (0, grid.dt()) };
    out.set_column(start, &y);
    for k in order {
        let (from, to) = if backward { (k + 1, k) } else { (k, k + 1) };
        let g0 = forcing.column(from).into_owned();
        let g1 = forcing.column(to).into_owned();
        let gm = midpoint(forcing, k);
        let k1 = f(&y, &g0);
        let k2 = f(&(&y + &k1 * (h / 2.0)), &gm);
        let k3 = f(&(&y + &k2 * (h / 2.0)), &gm);
        let k4 = f(&(&y + &k3 * h), &g1);
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.set_column(to, &y);
    }
    out
}

/// One RK4 step of `y' = F y` as a matrix.
fn rk4_propagator(f: &Mat, h: f64) -> Mat {
    let n = f.nrows();
    let hf = f * h;
    let hf2 = &hf * &hf;
    let hf3 = &hf2 * &hf;
    let hf4 = &hf3 * &hf;
    Mat::identity(n, n) + &hf + hf2 / 2.0 + hf3 / 6.0 + hf4 / 24.0
}

fn check_rho_hurwitz(a_cl: &Mat, rho: f64) -> Result<()> {
    let n = a_cl.nrows();
    if !linalg::is_hurwitz(&(a_cl - Mat::identity(n, n) * (rho / 2.0)), 0.0) {
        return Err(Error::Precondition("A_cl - (rho/2) I is not Hurwitz".into()));
    }
    Ok(())
}

/// `ds/dt = (ρI - Āᵀ) s + Q x̄` integrated backward from the quasi-stationary
/// closure `s(T) = (Āᵀ - ρI)⁻¹ Q x̄(T)`.
pub fn compute_s_trajectory(a_cl: &Mat, rho: f64, q: &Mat, xbar: &Path, grid: &TimeGrid) -> Result<Path> {
    grid.check_path(xbar)?;
    let n = a_cl.nrows();
    if xbar.nrows() != n || q.shape() != (n, n) {
        return Err(Error::Dimension("s equation blocks are not conformable".into()));
    }
    check_rho_hurwitz(a_cl, rho)?;
    let closure = a_cl.transpose() - Mat::identity(n, n) * rho;
    let qx_t = q * xbar.column(grid.steps());
    let s_t = linalg::solve(&closure, &Mat::from_column_slice(n, 1, qx_t.as_slice()), "s closure")?;
    let l = -closure;
    let forcing = q * xbar;
    Ok(rk4_linear(&l, &forcing, s_t.column(0).into_owned(), grid, true))
}

/// `dg/dt = ρ g + sᵀ S s - x̄ᵀ Q x̄`, `S = B R_eff⁻¹ Bᵀ`, integrated backward
/// from `g(T) = (x̄ᵀQx̄ - sᵀSs)/ρ`. Needs `ρ > 0`.
pub fn compute_g_trajectory(
    r_eff: &Mat,
    s: &Path,
    xbar: &Path,
    params: &GameParameters,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    grid.check_path(s)?;
    grid.check_path(xbar)?;
    if params.rho <= 0.0 {
        return Err(Error::Precondition("g needs rho > 0 for its terminal closure".into()));
    }
    let sm = control_weight(&params.b, r_eff)?;
    let forcing_at = |k: usize| {
        let sk = s.column(k);
        let xk = xbar.column(k);
        (sk.transpose() * &sm * sk)[(0, 0)] - (xk.transpose() * &params.q * xk)[(0, 0)]
    };
    let forcing = Path::from_fn(1, grid.len(), |_, k| forcing_at(k));
    let g_t = -forcing[(0, grid.steps())] / params.rho;
    let l = Mat::from_element(1, 1, params.rho);
    let g = rk4_linear(&l, &forcing, Vector::from_element(1, g_t), grid, true);
    Ok(g.row(0).iter().copied().collect())
}

/// `S = B R_eff⁻¹ Bᵀ`
pub fn control_weight(b: &Mat, r_eff: &Mat) -> Result<Mat> {
    Ok(b * linalg::solve(r_eff, &b.transpose(), "R_eff")?)
}

/// One atom `θ` of the parameter distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentClass {
    pub label: String,
    pub params: GameParameters,
    pub weight: f64,
}

impl AgentClass {
    pub fn new(label: impl Into<String>, params: GameParameters, weight: f64) -> Self {
        Self {
            label: label.into(),
            params,
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSolution {
    pub label: String,
    pub weight: f64,
    pub params: GameParameters,
    pub sare: SareSolution,
    pub s: Path,
    pub xbar: Path,
    /// Absent when `ρ = 0`.
    pub g: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSolution {
    pub grid: TimeGrid,
    pub rho: f64,
    pub xbar: Path,
    pub classes: Vec<ClassSolution>,
    /// `√∫e^{-ρt}‖x̄ᵏ⁺¹ - x̄ᵏ‖²` of the last sweep (zero for the direct solver).
    pub fixed_point_residual: f64,
    pub iterations: usize,
    /// Decoupling gain `K` with `s = K x̄` (uniform solver only).
    pub decoupling_gain: Option<Mat>,
    pub warnings: Vec<String>,
}

/// Uniform agents: `s = K x̄` with `K` from the decoupling Riccati equation
/// and `dx̄/dt = (Ā - S K) x̄`, `x̄(0) = x̄₀`.
pub fn solve_uniform_consistency(params: &GameParameters, grid: &TimeGrid) -> Result<MeanFieldSolution> {
    let sare = riccati::solve_sare(params, SareOptions::default())?;
    solve_uniform_with(params, sare, grid)
}

pub fn solve_uniform_with(params: &GameParameters, sare: SareSolution, grid: &TimeGrid) -> Result<MeanFieldSolution> {
    let n = params.state_dim();
    let k = riccati::solve_gain_riccati(&sare.a_cl, &params.b, &sare.r_eff, &params.q, params.rho)?;
    let sm = control_weight(&params.b, &sare.r_eff)?;
    let f = &sare.a_cl - &sm * &k;
    let step = rk4_propagator(&f, grid.dt());
    let mut xbar = Path::zeros(n, grid.len());
    let mut x = params.x0_mean.clone();
    xbar.set_column(0, &x);
    for j in 1..grid.len() {
        x = &step * x;
        xbar.set_column(j, &x);
    }
    let s = &k * &xbar;
    let g = if params.rho > 0.0 {
        Some(compute_g_trajectory(&sare.r_eff, &s, &xbar, params, grid)?)
    } else {
        None
    };
    let mut warnings = Vec::new();
    if !sare.detectable {
        warnings.push("exact detectability fails; Riccati solution may not be unique".into());
    }
    if g.is_none() {
        warnings.push("rho = 0: g is unavailable".into());
    }
    Ok(MeanFieldSolution {
        grid: *grid,
        rho: params.rho,
        xbar: xbar.clone(),
        classes: vec![ClassSolution {
            label: "uniform".into(),
            weight: 1.0,
            params: params.clone(),
            sare,
            s,
            xbar,
            g,
        }],
        fixed_point_residual: 0.0,
        iterations: 0,
        decoupling_gain: Some(k),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

/// Checks shared parameters, weights and the common initial mean.
pub fn validate_classes(classes: &[AgentClass]) -> Result<()> {
    let first = classes
        .first()
        .ok_or_else(|| Error::ClassMismatch("empty class list".into()))?;
    let p0 = &first.params;
    for c in classes {
        c.params.validate()?;
        let p = &c.params;
        if p.a.shape() != p0.a.shape() || p.b.shape() != p0.b.shape() {
            return Err(Error::ClassMismatch(format!("class `{}` has different dimensions", c.label)));
        }
        let same = p.b == p0.b && p.c == p0.c && p.d == p0.d && p.q == p0.q && p.r == p0.r && p.rho == p0.rho;
        if !same {
            return Err(Error::ClassMismatch(format!(
                "class `{}` differs from `{}` outside A",
                c.label, first.label
            )));
        }
        if p.x0_mean != p0.x0_mean {
            return Err(Error::ClassMismatch(format!("class `{}` has a different initial mean", c.label)));
        }
        if !(c.weight >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "weight",
                reason: format!("class `{}` has weight {}", c.label, c.weight),
            });
        }
    }
    let total: f64 = classes.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidParameter {
            name: "weight",
            reason: format!("class weights sum to {total}"),
        });
    }
    Ok(())
}

struct ClassData {
    sare: SareSolution,
    sm: Mat,
}

fn class_mean(class: &AgentClass, data: &ClassData, xbar: &Path, grid: &TimeGrid) -> Result<(Path, Path)> {
    let s = compute_s_trajectory(&data.sare.a_cl, class.params.rho, &class.params.q, xbar, grid)?;
    let forcing = -(&data.sm * &s);
    let xb = rk4_linear(&data.sare.a_cl, &forcing, class.params.x0_mean.clone(), grid, false);
    Ok((s, xb))
}

fn aggregate(classes: &[AgentClass], paths: &[Path]) -> Path {
    let mut out = Path::zeros(paths[0].nrows(), paths[0].ncols());
    for (c, p) in classes.iter().zip(paths) {
        out += p * c.weight;
    }
    out
}

/// Damped Picard iteration on `x̄ ↦ Σ_θ w_θ x̄_θ[x̄]`, started from the
/// constant path `x̄₀`.
pub fn solve_heterogeneous_consistency(
    classes: &[AgentClass],
    grid: &TimeGrid,
    opts: PicardOptions,
) -> Result<MeanFieldSolution> {
    validate_classes(classes)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "damping",
            reason: format!("must lie in (0, 1], got {}", opts.damping),
        });
    }
    let rho = classes[0].params.rho;
    let data: Vec<ClassData> = classes
        .iter()
        .map(|c| {
            let sare = riccati::solve_sare(&c.params, SareOptions::default())?;
            let sm = control_weight(&c.params.b, &sare.r_eff)?;
            Ok(ClassData { sare, sm })
        })
        .collect::<Result<_>>()?;

    let n = classes[0].params.state_dim();
    let x0 = &classes[0].params.x0_mean;
    let mut xbar = Path::from_fn(n, grid.len(), |i, _| x0[i]);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let mut xs = Vec::with_capacity(classes.len());
        for (c, d) in classes.iter().zip(&data) {
            xs.push(class_mean(c, d, &xbar, grid)?.1);
        }
        let agg = aggregate(classes, &xs);
        let next = &xbar * (1.0 - opts.damping) + agg * opts.damping;
        residual = grid.discounted_sq_norm(&(&next - &xbar), rho)?.sqrt();
        xbar = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            return finish_heterogeneous(classes, data, grid, xbar, residual, it);
        }
    }
    Err(Error::NotConverged {
        what: "Picard iteration",
        iterations: opts.max_iter,
        residual,
    })
}

fn finish_heterogeneous(
    classes: &[AgentClass],
    data: Vec<ClassData>,
    grid: &TimeGrid,
    xbar: Path,
    residual: f64,
    iterations: usize,
) -> Result<MeanFieldSolution> {
    let rho = classes[0].params.rho;
    let mut out = Vec::with_capacity(classes.len());
    let mut xs = Vec::with_capacity(classes.len());
    let mut warnings = Vec::new();
    for (c, d) in classes.iter().zip(data) {
        let (s, xb) = class_mean(c, &d, &xbar, grid)?;
        let g = if rho > 0.0 {
            Some(compute_g_trajectory(&d.sare.r_eff, &s, &xbar, &c.params, grid)?)
        } else {
            None
        };
        if !d.sare.detectable {
            warnings.push(format!("class `{}`: exact detectability fails", c.label));
        }
        xs.push(xb.clone());
        out.push(ClassSolution {
            label: c.label.clone(),
            weight: c.weight,
            params: c.params.clone(),
            sare: d.sare,
            s,
            xbar: xb,
            g,
        });
    }
    if rho == 0.0 {
        warnings.push("rho = 0: g is unavailable".into());
    }
    // report the aggregate of the class means so the aggregation identity
    // holds exactly; its distance to the iterate is the certificate
    let agg = aggregate(classes, &xs);
    let certificate = grid.discounted_sq_norm(&(&agg - &xbar), rho)?.sqrt();
    Ok(MeanFieldSolution {
        grid: *grid,
        rho,
        xbar: agg,
        classes: out,
        fixed_point_residual: residual.max(certificate),
        iterations,
        decoupling_gain: None,
        warnings,
    })
}

/// Runs the Picard solver under several damping factors and reports the
/// largest pairwise distance between the fixed points found.
pub fn damping_sensitivity(
    classes: &[AgentClass],
    grid: &TimeGrid,
    dampings: &[f64],
    base: PicardOptions,
) -> Result<(Vec<MeanFieldSolution>, f64)> {
    let sols: Vec<MeanFieldSolution> = dampings
        .iter()
        .map(|&damping| solve_heterogeneous_consistency(classes, grid, PicardOptions { damping, ..base }))
        .collect::<Result<_>>()?;
    let mut spread: f64 = 0.0;
    for i in 0..sols.len() {
        for j in (i + 1)..sols.len() {
            spread = spread.max(path_distance(grid, &sols[i].xbar, grid, &sols[j].xbar, sols[i].rho)?);
        }
    }
    Ok((sols, spread))
}

/// `√∫e^{-ρt}‖a - b‖²` on a common grid.
pub fn path_distance(grid_a: &TimeGrid, a: &Path, grid_b: &TimeGrid, b: &Path, rho: f64) -> Result<f64> {
    if !grid_a.matches(grid_b) {
        return Err(Error::GridMismatch("paths live on different grids".into()));
    }
    if a.shape() != b.shape() {
        return Err(Error::GridMismatch(format!("path shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(grid_a.discounted_sq_norm(&(a - b), rho)?.sqrt())
}

/// `ε_N`: discounted distance between the mean aggregated with empirical
/// weights and with the limit weights, using the limit class means.
pub fn epsilon_n(limit: &MeanFieldSolution, empirical_weights: &[f64]) -> Result<f64> {
    if empirical_weights.len() != limit.classes.len() {
        return Err(Error::ClassMismatch(format!(
            "{} empirical weights for {} classes",
            empirical_weights.len(),
            limit.classes.len()
        )));
    }
    let mut diff = Path::zeros(limit.xbar.nrows(), limit.xbar.ncols());
    for (c, w) in limit.classes.iter().zip(empirical_weights) {
        diff += &c.xbar * (w - c.weight);
    }
    Ok(limit.grid.discounted_sq_norm(&diff, limit.rho)?.sqrt())
}

/// Empirical class weights of a sample given as class indices.
pub fn empirical_weights(sample: &[usize], classes: usize) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::InvalidParameter {
            name: "sample",
            reason: "empty sample".into(),
        });
    }
    let mut w = vec![0.0; classes];
    for &i in sample {
        if i >= classes {
            return Err(Error::ClassMismatch(format!("class index {i} out of range")));
        }
        w[i] += 1.0;
    }
    let n = sample.len() as f64;
    Ok(w.into_iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStrategy {
    pub label: String,
    /// `G = R_eff⁻¹(BᵀP + DᵀPC)`
    pub gain: Mat,
    pub r_eff: Mat,
    /// `o(t) = R_eff⁻¹ Bᵀ s(t)`, `r × (M+1)`.
    pub offset: Path,
}

/// `û(t) = -G_θ x(t) - o_θ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecentralizedStrategy {
    pub grid: TimeGrid,
    pub classes: Vec<ClassStrategy>,
}

impl DecentralizedStrategy {
    /// Offset at time `t`, linear between nodes and held constant past `T`.
    pub fn offset_at(&self, class: usize, t: f64) -> Vector {
        let o = &self.classes[class].offset;
        let m = self.grid.steps();
        if t <= 0.0 {
            return o.column(0).into_owned();
        }
        if t >= self.grid.horizon() {
            return o.column(m).into_owned();
        }
        let pos = t / self.grid.dt();
        let k = (pos.floor() as usize).min(m - 1);
        let w = pos - k as f64;
        o.column(k) * (1.0 - w) + o.column(k + 1) * w
    }

    pub fn control(&self, class: usize, x: &Vector, t: f64) -> Vector {
        -(&self.classes[class].gain * x) - self.offset_at(class, t)
    }
}

pub fn build_strategy(mf: &MeanFieldSolution) -> Result<DecentralizedStrategy> {
    let classes = mf
        .classes
        .iter()
        .map(|c| {
            let offset = linalg::solve(&c.sare.r_eff, &(c.params.b.transpose() * &c.s), "R_eff")?;
            if c.params.is_integrator() {
                let expect = -(&c.sare.gain * &c.params.x0_mean);
                let worst = (0..offset.ncols())
                    .map(|k| (offset.column(k) - &expect).amax())
                    .fold(0.0, f64::max);
                if worst > 1e-8 * expect.amax().max(1.0) {
                    return Err(Error::Precondition(format!(
                        "integrator class `{}`: offset deviates from -G x0 by {worst:e}",
                        c.label
                    )));
                }
            }
            Ok(ClassStrategy {
                label: c.label.clone(),
                gain: c.sare.gain.clone(),
                r_eff: c.sare.r_eff.clone(),
                offset,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DecentralizedStrategy { grid: mf.grid, classes })
}
