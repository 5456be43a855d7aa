use super::engine::TrajectoryEnsemble;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::meanfield::{Path, TimeGrid};

/// What the cost of agent `i` tracks.
#[derive(Debug, Clone, PartialEq)]
pub enum CostReference {
    /// `x^{(N)}` of each replication.
    PopulationAverage,
    /// A deterministic `n × nodes` path on the record nodes.
    Supplied(Mat),
    Constant(Vector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    /// Sample standard deviation over replications divided by `√replications`.
    pub stderr: f64,
    pub values: Vec<f64>,
    /// `e^{-ρT} · (mean integrand at T) / ρ`: the neglected tail if the
    /// integrand stops growing after `T`.
    pub tail_bound: f64,
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

impl CostEstimate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let (mean, stderr) = mean_and_stderr(&values);
        Self {
            mean,
            stderr,
            values,
            tail_bound: 0.0,
        }
    }
}

/// Trapezoid rule for `∫ e^{-ρt} f(t) dt` over the given nodes.
pub fn discounted_integral(times: &[f64], rho: f64, mut f: impl FnMut(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    let mut prev = (-rho * times[0]).exp() * f(0);
    for j in 1..times.len() {
        let cur = (-rho * times[j]).exp() * f(j);
        acc += 0.5 * (times[j] - times[j - 1]) * (prev + cur);
        prev = cur;
    }
    acc
}

fn quad(m: &Mat, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += v[i] * m[(i, j)] * v[j];
        }
    }
    acc
}

/// `∫ e^{-ρt} (‖x − ref‖²_Q + ‖u‖²_R) dt` for one recorded path.
pub fn discounted_cost(times: &[f64], x: &Mat, u: &Mat, reference: &Mat, q: &Mat, r: &Mat, rho: f64) -> f64 {
    let n = x.nrows();
    let mut e = vec![0.0; n];
    discounted_integral(times, rho, |j| {
        for i in 0..n {
            e[i] = x[(i, j)] - reference[(i, j)];
        }
        let uj: Vec<f64> = u.column(j).iter().copied().collect();
        quad(q, &e) + quad(r, &uj)
    })
}

fn reference_path(ens: &TrajectoryEnsemble, reference: &CostReference, m: usize) -> Result<Mat> {
    match reference {
        CostReference::PopulationAverage => Ok(ens.population_average[m].clone()),
        CostReference::Supplied(p) => {
            if p.shape() != (ens.state_dim, ens.nodes()) {
                return Err(Error::GridMismatch(format!(
                    "reference path is {:?}, record grid needs {:?}",
                    p.shape(),
                    (ens.state_dim, ens.nodes())
                )));
            }
            Ok(p.clone())
        }
        CostReference::Constant(v) => {
            if v.len() != ens.state_dim {
                return Err(Error::Dimension("constant reference has the wrong length".into()));
            }
            Ok(Mat::from_fn(ens.state_dim, ens.nodes(), |i, _| v[i]))
        }
    }
}

/// Discounted cost of a tracked agent, one value per kept replication.
pub fn estimate_cost(
    ens: &TrajectoryEnsemble,
    q: &Mat,
    r: &Mat,
    rho: f64,
    reference: &CostReference,
    agent: usize,
) -> Result<CostEstimate> {
    let tracked = ens
        .tracked_agent(agent)
        .ok_or_else(|| Error::MissingPaths(format!("agent {agent} was not tracked")))?;
    if q.shape() != (ens.state_dim, ens.state_dim) || r.shape() != (ens.control_dim, ens.control_dim) {
        return Err(Error::Dimension("cost weights do not match the ensemble".into()));
    }
    let mut values = Vec::with_capacity(ens.kept());
    let mut last = 0.0;
    let nodes = ens.nodes();
    for m in 0..ens.kept() {
        let refp = reference_path(ens, reference, m)?;
        let (x, u) = (&tracked.states[m], &tracked.controls[m]);
        values.push(discounted_cost(&ens.times, x, u, &refp, q, r, rho));
        let e: Vec<f64> = (0..ens.state_dim).map(|i| x[(i, nodes - 1)] - refp[(i, nodes - 1)]).collect();
        let uj: Vec<f64> = u.column(nodes - 1).iter().copied().collect();
        last += quad(q, &e) + quad(r, &uj);
    }
    let mut est = CostEstimate::from_values(values);
    let horizon = *ens.times.last().unwrap_or(&0.0);
    est.tail_bound = if rho > 0.0 {
        (-rho * horizon).exp() * (last / ens.kept() as f64) / rho
    } else {
        f64::INFINITY
    };
    Ok(est)
}

/// `∫ e^{-ρt} ‖x^{(N)} − x̄‖² dt` per replication; `xbar` lives on the record nodes.
pub fn mean_field_error(ens: &TrajectoryEnsemble, xbar: &Mat, rho: f64) -> Result<CostEstimate> {
    if xbar.shape() != (ens.state_dim, ens.nodes()) {
        return Err(Error::GridMismatch("mean path does not match the record grid".into()));
    }
    let values = ens
        .population_average
        .iter()
        .map(|avg| discounted_integral(&ens.times, rho, |j| (avg.column(j) - xbar.column(j)).norm_squared()))
        .collect();
    Ok(CostEstimate::from_values(values))
}

/// Linear interpolation of a grid path at the given times (held past the ends).
pub fn sample_path(grid: &TimeGrid, path: &Path, times: &[f64]) -> Result<Mat> {
    if path.ncols() != grid.len() {
        return Err(Error::GridMismatch("path does not match its grid".into()));
    }
    let m = grid.steps();
    Ok(Mat::from_fn(path.nrows(), times.len(), |i, j| {
        let t = times[j];
        if t <= 0.0 {
            return path[(i, 0)];
        }
        if t >= grid.horizon() {
            return path[(i, m)];
        }
        let pos = t / grid.dt();
        let k = (pos.floor() as usize).min(m - 1);
        let w = pos - k as f64;
        path[(i, k)] * (1.0 - w) + path[(i, k + 1)] * w
    }))
}

/// Running `∫₀ᵗ e^{-ρs} max_i E(‖x_i‖² + ‖u_i‖²) ds` at the record nodes.
pub fn max_agent_energy_integral(ens: &TrajectoryEnsemble, rho: f64) -> Result<Vec<f64>> {
    let energy = ens
        .agent_energy
        .as_ref()
        .ok_or_else(|| Error::MissingPaths("agent statistics were not collected".into()))?;
    let maxima: Vec<f64> = (0..ens.nodes()).map(|j| energy.column(j).max()).collect();
    let mut out = vec![0.0; ens.nodes()];
    for j in 1..ens.nodes() {
        let (t0, t1) = (ens.times[j - 1], ens.times[j]);
        let f0 = (-rho * t0).exp() * maxima[j - 1];
        let f1 = (-rho * t1).exp() * maxima[j];
        out[j] = out[j - 1] + 0.5 * (t1 - t0) * (f0 + f1);
    }
    Ok(out)
}

/// Least-squares fit of `ln y = a + λ t` on a time window.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    pub rate_stderr: f64,
    /// 95% normal interval for the rate.
    pub ci: (f64, f64),
    pub window: (f64, f64),
    pub points: usize,
    /// Nodes in the window dropped because the value was not positive.
    pub dropped_nonpositive: usize,
}

pub fn fit_decay_rate(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<DecayFit> {
    if times.len() != values.len() {
        return Err(Error::Dimension("times and values differ in length".into()));
    }
    let mut pts = Vec::new();
    let mut dropped = 0;
    for (&t, &v) in times.iter().zip(values) {
        if t < window.0 - 1e-12 || t > window.1 + 1e-12 {
            continue;
        }
        if v > 0.0 && v.is_finite() {
            pts.push((t, v.ln()));
        } else {
            dropped += 1;
        }
    }
    let m = pts.len();
    if m < 2 {
        return Err(Error::Precondition(format!(
            "decay fit needs two positive values in [{}, {}], found {m}",
            window.0, window.1
        )));
    }
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("decay fit window holds a single time".into()));
    }
    let rate = sxy / sxx;
    let intercept = ym - rate * tm;
    let rate_stderr = if m > 2 {
        let ssr: f64 = pts.iter().map(|p| (p.1 - intercept - rate * p.0).powi(2)).sum();
        (ssr / (m - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(DecayFit {
        rate,
        intercept,
        rate_stderr,
        ci: (rate - 1.96 * rate_stderr, rate + 1.96 * rate_stderr),
        window,
        points: m,
        dropped_nonpositive: dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMetrics {
    pub times: Vec<f64>,
    /// Pooled `E‖x_i − x̄₀‖²` with its standard error across replications.
    pub from_target: Vec<f64>,
    pub from_target_stderr: Vec<f64>,
    /// Pooled `E‖x_i − x^{(N)}‖²`.
    pub from_average: Vec<f64>,
    pub from_average_stderr: Vec<f64>,
    /// `E‖x_i − x̄₀‖²` per agent (`N × nodes`) when collected.
    pub per_agent: Option<Mat>,
    /// Fit of the pooled deviation from `x̄₀`.
    pub fit: DecayFit,
}

fn pooled(per_rep: &[Vec<f64>], nodes: usize) -> (Vec<f64>, Vec<f64>) {
    (0..nodes)
        .map(|j| {
            let col: Vec<f64> = per_rep.iter().map(|v| v[j]).collect();
            mean_and_stderr(&col)
        })
        .unzip()
}

/// Consensus metrics with the decay fit on `[T/4, 3T/4]`.
pub fn consensus_metrics(ens: &TrajectoryEnsemble) -> Result<ConsensusMetrics> {
    let t = ens.grid.horizon();
    consensus_metrics_in(ens, (0.25 * t, 0.75 * t))
}

pub fn consensus_metrics_in(ens: &TrajectoryEnsemble, window: (f64, f64)) -> Result<ConsensusMetrics> {
    let nodes = ens.nodes();
    let (from_target, from_target_stderr) = pooled(&ens.deviation_from_target, nodes);
    let (from_average, from_average_stderr) = pooled(&ens.deviation_from_average, nodes);
    let fit = fit_decay_rate(&ens.times, &from_target, window)?;
    Ok(ConsensusMetrics {
        times: ens.times.clone(),
        from_target,
        from_target_stderr,
        from_average,
        from_average_stderr,
        per_agent: ens.agent_deviation.clone(),
        fit,
    })
}
