//! Monte Carlo audits of optimality.
//!
//! The limiting control problem is checked through the completing-the-square
//! identity `J̄(u) = E V(0, x₀) + E∫e^{-ρt}‖u - ū‖²_{R_eff} dt` with
//! `V(t, x) = xᵀPx + 2s(t)ᵀx + g(t)`, on a truncated horizon where the
//! terminal term `e^{-ρT} E V(T, x_T)` is kept explicitly. In the `N`-agent
//! game one agent deviates while the others keep `û`; with the counter-based
//! generator the deviating agent can be re-simulated alone with the exact
//! noise of the baseline run, and the population average it sees moves by
//! `(x_i' - x_i)/N`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::meanfield::{compute_s_trajectory, DecentralizedStrategy, MeanFieldSolution, Path, TimeGrid};
use crate::riccati::{convexity_threshold, solve_sare, GameParameters, SareOptions, SareSolution};
use crate::simkit::{
    discounted_cost, discounted_integral, mean_and_stderr, rng, sample_path, simulate_closed_loop,
    simulate_single_agent, with_pool, AffineFeedback, AgentDynamics, Policy, SimulationConfig,
};

/// Deviations only count as beating `û` beyond this many pooled standard errors.
pub const SIGNIFICANCE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, stderr) = mean_and_stderr(values);
        Self { mean, stderr }
    }
}

/// `δ(x, t) = ΔK x + c + a sin(ωt)` added to a base control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perturbation {
    pub label: String,
    /// `r × n` row-major, empty when there is no feedback part.
    pub gain: Vec<f64>,
    pub constant: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub frequency: f64,
}

impl Perturbation {
    pub fn constant(c: &[f64]) -> Self {
        Self::sinusoid(c, &vec![0.0; c.len()], 0.0)
    }

    pub fn sinusoid(c: &[f64], amplitude: &[f64], frequency: f64) -> Self {
        Self {
            label: format!("offset c={c:?} a={amplitude:?} w={frequency}"),
            gain: Vec::new(),
            constant: c.to_vec(),
            amplitude: amplitude.to_vec(),
            frequency,
        }
    }

    pub fn with_gain(mut self, gain: &Mat) -> Self {
        self.gain = (0..gain.nrows())
            .flat_map(|i| (0..gain.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| gain[(i, j)])
            .collect();
        self.label = format!("{} dK={:?}", self.label, self.gain);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// No state feedback part, so `u_λ = ū + λδ` moves the state affinely in `λ`.
    pub fn is_open_loop(&self) -> bool {
        self.gain.is_empty()
    }

    fn check(&self, n: usize, r: usize) -> Result<()> {
        if self.constant.len() != r || self.amplitude.len() != r || !(self.gain.is_empty() || self.gain.len() == r * n) {
            return Err(Error::Dimension(format!("perturbation `{}` does not fit r={r}, n={n}", self.label)));
        }
        if !self.frequency.is_finite() || self.constant.iter().chain(&self.amplitude).chain(&self.gain).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "perturbation",
                reason: format!("`{}` has non-finite entries", self.label),
            });
        }
        Ok(())
    }
}

/// `base + scale · δ`.
pub struct Perturbed<'a, P: ?Sized> {
    pub base: &'a P,
    pub delta: &'a Perturbation,
    pub scale: f64,
}

impl<P: Policy + ?Sized> Policy for Perturbed<'_, P> {
    #[inline]
    fn control(&self, k: usize, t: f64, x: &[f64], u: &mut [f64]) {
        self.base.control(k, t, x, u);
        let d = self.delta;
        let wave = (d.frequency * t).sin();
        let n = x.len();
        for j in 0..u.len() {
            let mut acc = d.constant[j] + d.amplitude[j] * wave;
            if !d.gain.is_empty() {
                for l in 0..n {
                    acc += d.gain[j * n + l] * x[l];
                }
            }
            u[j] += self.scale * acc;
        }
    }
}

/// Scalar `u = clamp(-k (x - b), -bound, bound)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaturatedFeedback {
    pub k: f64,
    pub b: f64,
    pub bound: f64,
}

impl Policy for SaturatedFeedback {
    #[inline]
    fn control(&self, _k: usize, _t: f64, x: &[f64], u: &mut [f64]) {
        u[0] = (-self.k * (x[0] - self.b)).clamp(-self.bound, self.bound);
    }
}

/// `count` seeded feedback controls with `k ∈ [-1, 2]`, `b ∈ [-2, 2]`,
/// saturated at `bound`.
pub fn sample_bounded_controls(count: usize, seed: u64, bound: f64) -> Vec<SaturatedFeedback> {
    let key = rng::key_of(seed);
    (0..count)
        .map(|i| {
            let w = rng::philox4x32_10([i as u32, 0, 0, 2], key);
            let unit = |v: u32| v as f64 / 4_294_967_296.0;
            SaturatedFeedback {
                k: -1.0 + 3.0 * unit(w[0]),
                b: -2.0 + 4.0 * unit(w[1]),
                bound,
            }
        })
        .collect()
}

/// Problem (P1) of one class against its deterministic mean path.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitProblem {
    pub params: GameParameters,
    pub sare: SareSolution,
    pub grid: TimeGrid,
    pub xbar: Path,
    pub s: Path,
    pub g: Vec<f64>,
}

/// The limit problem resampled on a simulation grid.
struct Sampled {
    times: Vec<f64>,
    xbar: Mat,
    s: Mat,
    g: Vec<f64>,
    optimal: AffineFeedback,
}

/// Per-replication integrals of one path.
#[derive(Debug, Clone, Copy, Default)]
struct PathTerms {
    cost: f64,
    /// `V(0, x₀) - e^{-ρT} V(T, x_T)`
    value: f64,
    /// `∫e^{-ρt}‖u - ū‖²_{R_eff}`
    excess: f64,
    /// `∫e^{-ρt}‖u‖²`
    energy: f64,
    /// `‖x₀ - x̄₀‖²`
    initial_spread: f64,
}

impl LimitProblem {
    pub fn from_solution(mf: &MeanFieldSolution, class: usize) -> Result<Self> {
        let c = mf
            .classes
            .get(class)
            .ok_or_else(|| Error::ClassMismatch(format!("class {class} of {}", mf.classes.len())))?;
        let g = c
            .g
            .clone()
            .ok_or_else(|| Error::Precondition("the limit problem needs g, which requires rho > 0".into()))?;
        Ok(Self {
            params: c.params.clone(),
            sare: c.sare.clone(),
            grid: mf.grid,
            xbar: c.xbar.clone(),
            s: c.s.clone(),
            g,
        })
    }

    /// `ū = -G x - R_eff⁻¹ Bᵀ s(t)` tabulated on `sim`.
    pub fn optimal_policy(&self, sim: &TimeGrid) -> Result<AffineFeedback> {
        let s = sample_path(&self.grid, &self.s, &sim.nodes())?;
        let offsets = linalg::solve(&self.sare.r_eff, &(self.params.b.transpose() * s), "R_eff")?;
        Ok(AffineFeedback::tabulated(&self.sare.gain, &offsets))
    }

    /// `E V(0, x₀)` for `x₀ ~ (mean, cov)`.
    pub fn optimal_value(&self, mean: &Vector, cov: &Mat) -> f64 {
        let p = &self.sare.p;
        (p * cov).trace() + (mean.transpose() * p * mean)[(0, 0)] + 2.0 * self.s.column(0).dot(mean) + self.g[0]
    }

    fn sampled(&self, config: &SimulationConfig) -> Result<Sampled> {
        let sim = config.grid()?;
        if config.initial.dim() != self.params.state_dim() {
            return Err(Error::Dimension("initial law does not match the limit problem".into()));
        }
        let times = sim.nodes();
        let gpath = Path::from_row_slice(1, self.g.len(), &self.g);
        Ok(Sampled {
            xbar: sample_path(&self.grid, &self.xbar, &times)?,
            s: sample_path(&self.grid, &self.s, &times)?,
            g: sample_path(&self.grid, &gpath, &times)?.row(0).iter().copied().collect(),
            optimal: self.optimal_policy(&sim)?,
            times,
        })
    }

    fn value_at(&self, sm: &Sampled, k: usize, x: &[f64]) -> f64 {
        let n = x.len();
        let p = &self.sare.p;
        let mut v = sm.g[k];
        for i in 0..n {
            v += 2.0 * sm.s[(i, k)] * x[i];
            for j in 0..n {
                v += x[i] * p[(i, j)] * x[j];
            }
        }
        v
    }

    fn path_terms<P: Policy + ?Sized>(
        &self,
        sm: &Sampled,
        config: &SimulationConfig,
        dynamics: &AgentDynamics,
        policy: &P,
        rep: usize,
    ) -> Result<PathTerms> {
        let (x, u) = simulate_single_agent(config, dynamics, policy, 0, rep, 1)?;
        let (n, r) = (x.nrows(), u.nrows());
        let pr = &self.params;
        let r_eff = &self.sare.r_eff;
        let last = sm.times.len() - 1;
        let rho = pr.rho;
        let cost = discounted_cost(&sm.times, &x, &u, &sm.xbar, &pr.q, &pr.r, rho);
        let mut ubar = vec![0.0; r];
        let mut diff = vec![0.0; r];
        let excess = discounted_integral(&sm.times, rho, |k| {
            let xk: Vec<f64> = x.column(k).iter().copied().collect();
            sm.optimal.control(k, sm.times[k], &xk, &mut ubar);
            for j in 0..r {
                diff[j] = u[(j, k)] - ubar[j];
            }
            let mut acc = 0.0;
            for i in 0..r {
                for j in 0..r {
                    acc += diff[i] * r_eff[(i, j)] * diff[j];
                }
            }
            acc
        });
        let energy = discounted_integral(&sm.times, rho, |k| u.column(k).norm_squared());
        let x0: Vec<f64> = x.column(0).iter().copied().collect();
        let xt: Vec<f64> = x.column(last).iter().copied().collect();
        let value = self.value_at(sm, 0, &x0) - (-rho * sm.times[last]).exp() * self.value_at(sm, last, &xt);
        let initial_spread = (0..n).map(|i| (x0[i] - pr.x0_mean[i]).powi(2)).sum();
        let terms = PathTerms {
            cost,
            value,
            excess,
            energy,
            initial_spread,
        };
        if [cost, value, excess, energy].iter().all(|v| v.is_finite()) {
            Ok(terms)
        } else {
            Err(Error::BlowUp { excluded: 1, total: 1 })
        }
    }

    fn run<P: Policy + ?Sized>(&self, config: &SimulationConfig, policy: &P) -> Result<Vec<PathTerms>> {
        config.validate()?;
        let sm = self.sampled(config)?;
        let dynamics = AgentDynamics::from_params(&self.params, config.noise)?;
        let terms: Vec<Result<PathTerms>> = with_pool(config.threads, || {
            (0..config.replications)
                .into_par_iter()
                .map(|rep| self.path_terms(&sm, config, &dynamics, policy, rep))
                .collect()
        })?;
        let total = terms.len();
        let excluded = terms.iter().filter(|t| t.is_err()).count();
        if excluded > 0 {
            if let Some(Err(e)) = terms.iter().find(|t| !matches!(t, Err(Error::BlowUp { .. }) | Ok(_))) {
                return Err(e.clone());
            }
            return Err(Error::BlowUp { excluded, total });
        }
        Ok(terms.into_iter().map(|t| t.unwrap()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub replications: usize,
    pub seed: u64,
    pub horizon: f64,
    pub dt: f64,
    /// Truncated cost `∫₀ᵀ e^{-ρt}(‖x - x̄‖²_Q + ‖u‖²_R) dt`.
    pub cost: Estimate,
    /// `V(0, x₀) - e^{-ρT} V(T, x_T)`
    pub value_terms: Estimate,
    /// `∫₀ᵀ e^{-ρt}‖u - ū‖²_{R_eff} dt`
    pub excess_integral: Estimate,
    /// Cost minus value terms minus excess integral, per replication.
    pub defect: Estimate,
    /// `|defect| / stderr`
    pub normalized_defect: f64,
    /// `|defect| / (|cost| + |value terms|)`
    pub relative_defect: f64,
    pub passed: bool,
}

/// Within the Monte Carlo error, or below the `O(Δt)` bias of the
/// Euler–Maruyama scheme relative to the size of the terms.
fn defect_ok(defect: &Estimate, scale: f64, dt: f64) -> bool {
    normalized(defect) <= SIGNIFICANCE || defect.mean.abs() <= dt * scale
}

fn normalized(e: &Estimate) -> f64 {
    if e.stderr > 0.0 {
        e.mean.abs() / e.stderr
    } else if e.mean.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Both sides of the completing-the-square identity under `policy`, with
/// the same noise on every replication.
pub fn verify_completing_square<P: Policy + ?Sized>(
    problem: &LimitProblem,
    policy: &P,
    config: &SimulationConfig,
) -> Result<IdentityCheck> {
    let terms = problem.run(config, policy)?;
    let pick = |f: fn(&PathTerms) -> f64| Estimate::of(&terms.iter().map(f).collect::<Vec<_>>());
    let defect = pick(|t| t.cost - t.value - t.excess);
    let normalized_defect = normalized(&defect);
    let (cost, value_terms) = (pick(|t| t.cost), pick(|t| t.value));
    let scale = cost.mean.abs() + value_terms.mean.abs();
    let dt = config.grid()?.dt();
    Ok(IdentityCheck {
        replications: terms.len(),
        seed: config.seed,
        horizon: config.horizon,
        dt,
        cost,
        value_terms,
        excess_integral: pick(|t| t.excess),
        defect,
        normalized_defect,
        relative_defect: if scale > 0.0 { defect.mean.abs() / scale } else { 0.0 },
        passed: defect_ok(&defect, scale, dt),
    })
}

/// Paired `J̄_T(u) - J̄_T(ū)` with common random numbers.
pub fn cost_excess<P: Policy + ?Sized>(problem: &LimitProblem, policy: &P, config: &SimulationConfig) -> Result<Estimate> {
    let optimal = problem.optimal_policy(&config.grid()?)?;
    let a = problem.run(config, policy)?;
    let b = problem.run(config, &optimal)?;
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.cost - y.cost).collect();
    Ok(Estimate::of(&diff))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityCase {
    pub control: SaturatedFeedback,
    /// `J̄_T(u) - (V(0, x₀) - e^{-ρT} V(T, x_T))`
    pub excess: Estimate,
    /// `R_eff ∫e^{-ρt}(u - ū)²`
    pub excess_integral: Estimate,
    pub identity_defect: Estimate,
    /// `∫e^{-ρt} u²`
    pub energy: Estimate,
    /// Linear bound minus energy.
    pub energy_slack: Estimate,
    pub excess_nonnegative: bool,
    pub identity_holds: bool,
    pub energy_bounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub p: f64,
    pub r_eff: f64,
    pub gain: f64,
    /// `ρ + 2k - d²k²`
    pub decay: f64,
    /// Energy bound `slope · excess + intercept · E(x₀ - x̄₀)²`.
    pub slope: f64,
    pub intercept: f64,
    pub cases: Vec<CoercivityCase>,
    pub passed: bool,
}

/// Coercivity audit for the scalar integrator `dx = u dt + d·u dW`.
///
/// With `ū = -k(x - x̄₀)` and `w = u - ū`, Itô's formula on `(x - x̄₀)²` and
/// Young's inequality give
/// `E∫e^{-ρt}u² ≤ (2 + 4k²c/a) E∫e^{-ρt}w² + (4k²/a) E(x₀ - x̄₀)²`
/// with `a = ρ + 2k - d²k²` and `c = d² + 2(1 - d²k)²/a`, on any horizon.
pub fn coercivity_check(
    problem: &LimitProblem,
    controls: &[SaturatedFeedback],
    config: &SimulationConfig,
) -> Result<CoercivityReport> {
    let pr = &problem.params;
    if !pr.is_integrator() || pr.state_dim() != 1 || pr.control_dim() != 1 {
        return Err(Error::Precondition("coercivity check needs a scalar integrator".into()));
    }
    let (r, rho, d) = (pr.r[(0, 0)], pr.rho, pr.d[(0, 0)]);
    if !(r > convexity_threshold(rho)) {
        return Err(Error::Precondition(format!(
            "r = {r} is not above the convexity threshold {}",
            convexity_threshold(rho)
        )));
    }
    let p = problem.sare.p[(0, 0)];
    let r_eff = problem.sare.r_eff[(0, 0)];
    let k = problem.sare.gain[(0, 0)];
    let decay = rho + 2.0 * k - d * d * k * k;
    if !(r_eff > 0.0) || !(decay > 0.0) {
        return Err(Error::Precondition(format!(
            "degenerate constants: R_eff = {r_eff}, a = {decay}"
        )));
    }
    let c = d * d + 2.0 * (1.0 - d * d * k).powi(2) / decay;
    let slope = (2.0 + 4.0 * k * k * c / decay) / r_eff;
    let intercept = 4.0 * k * k / decay;
    let dt = config.grid()?.dt();
    let mut cases = Vec::with_capacity(controls.len());
    for ctl in controls {
        let terms = problem.run(config, ctl)?;
        let pick = |f: &dyn Fn(&PathTerms) -> f64| Estimate::of(&terms.iter().map(f).collect::<Vec<_>>());
        let excess = pick(&|t| t.cost - t.value);
        let excess_integral = pick(&|t| t.excess);
        let identity_defect = pick(&|t| t.cost - t.value - t.excess);
        let energy = pick(&|t| t.energy);
        let energy_slack = pick(&|t| slope * t.excess + intercept * t.initial_spread - t.energy);
        let excess_nonnegative = excess.mean >= -SIGNIFICANCE * excess.stderr;
        let scale = pick(&|t| t.cost).mean.abs() + pick(&|t| t.value).mean.abs();
        let identity_holds = defect_ok(&identity_defect, scale, dt);
        let energy_bounded = energy_slack.mean >= -SIGNIFICANCE * energy_slack.stderr;
        cases.push(CoercivityCase {
            control: *ctl,
            excess,
            excess_integral,
            identity_defect,
            energy,
            energy_slack,
            excess_nonnegative,
            identity_holds,
            energy_bounded,
        });
    }
    let passed = cases.iter().all(|c| c.excess_nonnegative && c.identity_holds && c.energy_bounded);
    Ok(CoercivityReport {
        p,
        r_eff,
        gain: k,
        decay,
        slope,
        intercept,
        cases,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityWitness {
    pub lambdas: Vec<f64>,
    pub costs: Vec<Estimate>,
    pub second_differences: Vec<Estimate>,
    pub passed: bool,
}

/// `J̄_T(ū + λδ)` on five equally spaced `λ ∈ [0, 1]`. The perturbation must
/// be open loop so that the control processes mix linearly in `λ`.
pub fn convexity_witness(problem: &LimitProblem, delta: &Perturbation, config: &SimulationConfig) -> Result<ConvexityWitness> {
    if !delta.is_open_loop() {
        return Err(Error::Unsupported(
            "feedback perturbations do not mix the control processes linearly".into(),
        ));
    }
    delta.check(problem.params.state_dim(), problem.params.control_dim())?;
    let optimal = problem.optimal_policy(&config.grid()?)?;
    let lambdas: Vec<f64> = (0..5).map(|j| j as f64 / 4.0).collect();
    let runs: Vec<Vec<f64>> = lambdas
        .iter()
        .map(|&l| {
            let pol = Perturbed {
                base: &optimal,
                delta,
                scale: l,
            };
            Ok(problem.run(config, &pol)?.iter().map(|t| t.cost).collect())
        })
        .collect::<Result<_>>()?;
    let costs = runs.iter().map(|v| Estimate::of(v)).collect();
    let second_differences: Vec<Estimate> = (1..4)
        .map(|j| {
            let d: Vec<f64> = (0..runs[0].len())
                .map(|m| runs[j - 1][m] - 2.0 * runs[j][m] + runs[j + 1][m])
                .collect();
            Estimate::of(&d)
        })
        .collect();
    let passed = second_differences.iter().all(|e| e.mean >= -SIGNIFICANCE * e.stderr);
    Ok(ConvexityWitness {
        lambdas,
        costs,
        second_differences,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DeviationFamily {
    /// Only `û_i` itself.
    EquilibriumOnly,
    /// `û_i + δ` for each perturbation.
    OffsetPaths(Vec<Perturbation>),
    /// `clamp(-k(x - b))` over a grid, then golden-section refinement in `k`
    /// at the best `b`. Scalar agents only.
    SaturatedFeedback {
        gains: Vec<f64>,
        offsets: Vec<f64>,
        bound: f64,
        refine_steps: usize,
    },
    /// Optimal response to the average path of an independent pilot run.
    TrackingBestResponse { pilot_replications: usize },
}

impl DeviationFamily {
    fn name(&self) -> &'static str {
        match self {
            Self::EquilibriumOnly => "equilibrium-only",
            Self::OffsetPaths(_) => "offset-paths",
            Self::SaturatedFeedback { .. } => "saturated-feedback",
            Self::TrackingBestResponse { .. } => "tracking-best-response",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSpec {
    pub agent: usize,
    pub family: DeviationFamily,
}

impl DeviationSpec {
    fn validate(&self, agents: usize) -> Result<()> {
        if self.agent >= agents {
            return Err(Error::InvalidParameter {
                name: "agent",
                reason: format!("{} is not below N = {agents}", self.agent),
            });
        }
        let finite = |v: &[f64]| !v.is_empty() && v.iter().all(|x| x.is_finite());
        match &self.family {
            DeviationFamily::SaturatedFeedback { gains, offsets, bound, .. } => {
                if !finite(gains) || !finite(offsets) || !(*bound > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "family",
                        reason: "feedback grid must be finite and non-empty with a positive bound".into(),
                    });
                }
            }
            DeviationFamily::TrackingBestResponse { pilot_replications } if *pilot_replications == 0 => {
                return Err(Error::InvalidParameter {
                    name: "pilot_replications",
                    reason: "must be positive".into(),
                });
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateResult {
    pub label: String,
    pub cost: Estimate,
    /// Paired `J_i(û) - J_i(deviation)`.
    pub advantage: Estimate,
    pub pooled_stderr: f64,
    pub beats_equilibrium: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashGapReport {
    pub agents: usize,
    pub agent: usize,
    pub replications: usize,
    pub seed: u64,
    pub pilot_seed: Option<u64>,
    pub horizon: f64,
    pub dt: f64,
    pub record_stride: usize,
    pub family: String,
    pub equilibrium_cost: Estimate,
    pub best_label: Option<String>,
    pub best_cost: Estimate,
    /// `J_i(û) - best found`.
    pub gap: f64,
    /// `sqrt(se_eq² + se_best²)`
    pub gap_stderr: f64,
    pub gap_paired_stderr: f64,
    pub candidates: Vec<CandidateResult>,
    /// Family members with non-finite costs.
    pub excluded: Vec<String>,
    pub violation: bool,
    pub note: String,
}

struct GapContext<'a> {
    config: &'a SimulationConfig,
    dynamics: AgentDynamics,
    params: &'a GameParameters,
    agent: usize,
    stride: usize,
    times: Vec<f64>,
    replications: Vec<usize>,
    states: &'a [Mat],
    averages: &'a [Mat],
}

impl GapContext<'_> {
    /// Cost of agent `i` under `policy` per kept replication; `None` when
    /// any replication is non-finite.
    fn evaluate<P: Policy + ?Sized>(&self, policy: &P) -> Result<Option<Vec<f64>>> {
        let n_agents = self.config.agents as f64;
        let pr = self.params;
        let values: Vec<Result<f64>> = with_pool(self.config.threads, || {
            (0..self.replications.len())
                .into_par_iter()
                .map(|m| {
                    let (x, u) =
                        simulate_single_agent(self.config, &self.dynamics, policy, self.agent, self.replications[m], self.stride)?;
                    let reference = &self.averages[m] + (&x - &self.states[m]) / n_agents;
                    Ok(discounted_cost(&self.times, &x, &u, &reference, &pr.q, &pr.r, pr.rho))
                })
                .collect()
        })?;
        let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
        Ok(values.iter().all(|v| v.is_finite()).then_some(values))
    }
}

fn golden_section(lo: f64, hi: f64, steps: usize, mut f: impl FnMut(f64) -> Result<f64>) -> Result<()> {
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..steps {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(())
}

fn pilot_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Best-response gap of agent `spec.agent` while all others keep `û`.
pub fn estimate_nash_gap(
    config: &SimulationConfig,
    classes: &[GameParameters],
    strategy: &DecentralizedStrategy,
    spec: &DeviationSpec,
) -> Result<NashGapReport> {
    let mut reports = estimate_nash_gaps(config, classes, strategy, spec.agent, std::slice::from_ref(&spec.family))?;
    Ok(reports.remove(0))
}

/// One report per family, all sharing a single baseline simulation.
pub fn estimate_nash_gaps(
    config: &SimulationConfig,
    classes: &[GameParameters],
    strategy: &DecentralizedStrategy,
    agent: usize,
    families: &[DeviationFamily],
) -> Result<Vec<NashGapReport>> {
    if config.agents < 2 {
        return Err(Error::Precondition("a Nash gap needs at least two agents".into()));
    }
    for family in families {
        DeviationSpec {
            agent,
            family: family.clone(),
        }
        .validate(config.agents)?;
    }
    let class = config.class(agent);
    let params = classes
        .get(class)
        .ok_or_else(|| Error::ClassMismatch(format!("agent {agent} has class {class}")))?;
    let mut base_cfg = config.clone();
    base_cfg.tracked_agents = vec![agent];
    base_cfg.agent_statistics = false;
    base_cfg.dump_replications = 0;
    let ens = simulate_closed_loop(&base_cfg, classes, strategy)?;
    let sim = base_cfg.grid()?;
    let equilibrium = AffineFeedback::from_strategy(strategy, class, &sim);
    let ctx = GapContext {
        config: &base_cfg,
        dynamics: AgentDynamics::from_params(params, base_cfg.noise)?,
        params,
        agent,
        stride: ens.record_stride,
        times: ens.times.clone(),
        replications: ens.replications.clone(),
        states: &ens.tracked[0].states,
        averages: &ens.population_average,
    };
    let eq_values = ctx
        .evaluate(&equilibrium)?
        .ok_or(Error::BlowUp { excluded: 1, total: 1 })?;
    let eq = Estimate::of(&eq_values);

    let mut reports = Vec::with_capacity(families.len());
    for family in families {
        let mut candidates = Vec::new();
        let mut excluded = Vec::new();
        let mut record = |label: String, values: Option<Vec<f64>>| -> f64 {
            let Some(values) = values else {
                excluded.push(label);
                return f64::INFINITY;
            };
            let cost = Estimate::of(&values);
            let adv: Vec<f64> = eq_values.iter().zip(&values).map(|(a, b)| a - b).collect();
            let advantage = Estimate::of(&adv);
            let pooled_stderr = eq.stderr.hypot(cost.stderr);
            candidates.push(CandidateResult {
                label,
                cost,
                advantage,
                pooled_stderr,
                beats_equilibrium: advantage.mean > SIGNIFICANCE * pooled_stderr,
            });
            cost.mean
        };

        let mut pilot = None;
        match family {
            DeviationFamily::EquilibriumOnly => {
                record("equilibrium".into(), Some(eq_values.clone()));
            }
            DeviationFamily::OffsetPaths(list) => {
                for delta in list {
                    delta.check(params.state_dim(), params.control_dim())?;
                    let pol = Perturbed {
                        base: &equilibrium,
                        delta,
                        scale: 1.0,
                    };
                    record(delta.label.clone(), ctx.evaluate(&pol)?);
                }
            }
            DeviationFamily::SaturatedFeedback {
                gains,
                offsets,
                bound,
                refine_steps,
            } => {
                if params.state_dim() != 1 || params.control_dim() != 1 {
                    return Err(Error::Unsupported("the saturated feedback family is scalar only".into()));
                }
                let mut gains = gains.clone();
                gains.sort_by(f64::total_cmp);
                gains.dedup();
                let label = |k: f64, b: f64| format!("saturated k={k} b={b} bound={bound}");
                let mut best = (f64::INFINITY, 0, offsets[0]);
                for (i, &k) in gains.iter().enumerate() {
                    for &b in offsets {
                        let v = record(label(k, b), ctx.evaluate(&SaturatedFeedback { k, b, bound: *bound })?);
                        if v < best.0 {
                            best = (v, i, b);
                        }
                    }
                }
                if best.0.is_finite() && gains.len() > 1 && *refine_steps > 0 {
                    let (_, i, b) = best;
                    let lo = gains[i.saturating_sub(1)];
                    let hi = gains[(i + 1).min(gains.len() - 1)];
                    golden_section(lo, hi, *refine_steps, |k| {
                        Ok(record(label(k, b), ctx.evaluate(&SaturatedFeedback { k, b, bound: *bound })?))
                    })?;
                }
            }
            DeviationFamily::TrackingBestResponse { pilot_replications } => {
                let seed = pilot_seed(config.seed);
                pilot = Some(seed);
                let mut pcfg = base_cfg.clone();
                pcfg.seed = seed;
                pcfg.replications = *pilot_replications;
                pcfg.tracked_agents.clear();
                let pens = simulate_closed_loop(&pcfg, classes, strategy)?;
                let mut mean = Mat::zeros(pens.state_dim, pens.nodes());
                for avg in &pens.population_average {
                    mean += avg;
                }
                mean /= pens.kept() as f64;
                let rec = TimeGrid::with_steps(sim.horizon(), pens.nodes() - 1)?;
                let sare = solve_sare(params, SareOptions::default())?;
                let s = compute_s_trajectory(&sare.a_cl, params.rho, &params.q, &mean, &rec)?;
                let s = sample_path(&rec, &s, &sim.nodes())?;
                let offsets = linalg::solve(&sare.r_eff, &(params.b.transpose() * s), "R_eff")?;
                let pol = AffineFeedback::tabulated(&sare.gain, &offsets);
                record("tracking best response to pilot mean".into(), ctx.evaluate(&pol)?);
            }
        }

        let best = candidates
            .iter()
            .min_by(|a, b| a.cost.mean.total_cmp(&b.cost.mean))
            .cloned();
        let (best_label, best_cost, gap, gap_stderr, gap_paired_stderr) = match &best {
            Some(c) => (Some(c.label.clone()), c.cost, c.advantage.mean, c.pooled_stderr, c.advantage.stderr),
            None => (None, eq, 0.0, 0.0, 0.0),
        };
        let violation = candidates.iter().any(|c| c.beats_equilibrium);
        reports.push(NashGapReport {
            agents: config.agents,
            agent,
            replications: ens.kept(),
            seed: config.seed,
            pilot_seed: pilot,
            horizon: sim.horizon(),
            dt: sim.dt(),
            record_stride: ens.record_stride,
            family: family.name().into(),
            equilibrium_cost: eq,
            best_label,
            best_cost,
            gap,
            gap_stderr,
            gap_paired_stderr,
            candidates,
            excluded,
            violation,
            note: "the best member of a finite deviation family only bounds the infimum over centralized controls from below"
                .into(),
        });
    }
    Ok(reports)
}

/// `gap·√N` of the largest population stays below the earlier maximum plus
/// three of its standard errors (scaled the same way).
pub fn scaled_gap_trend_ok(reports: &[NashGapReport]) -> bool {
    let mut sorted: Vec<&NashGapReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.agents);
    let Some((last, earlier)) = sorted.split_last() else {
        return true;
    };
    if earlier.is_empty() {
        return true;
    }
    let scaled = |r: &NashGapReport| r.gap * (r.agents as f64).sqrt();
    let ceiling = earlier.iter().map(|r| scaled(r)).fold(f64::NEG_INFINITY, f64::max);
    scaled(last) <= ceiling + SIGNIFICANCE * last.gap_stderr * (last.agents as f64).sqrt()
}
