use rayon::prelude::*;

use super::rng::{self, NormalStream};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::meanfield::{DecentralizedStrategy, TimeGrid};
use crate::riccati::GameParameters;

/// Law of the initial states `x_i(0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Independent `Normal(mean, cov)`; `cov` is a covariance, not a scale.
    Normal { mean: Vector, cov: Mat },
    /// Either `N` vectors reused in every replication or `N × replications`
    /// vectors indexed by `rep * N + agent`.
    Samples(Vec<Vector>),
}

impl InitialLaw {
    pub fn scalar_normal(mean: f64, variance: f64) -> Self {
        InitialLaw::Normal {
            mean: Vector::from_element(1, mean),
            cov: Mat::from_element(1, 1, variance),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Normal { mean, .. } => mean.len(),
            InitialLaw::Samples(s) => s.first().map_or(0, |v| v.len()),
        }
    }

    /// Law mean, or the sample average for explicit samples.
    pub fn mean(&self) -> Vector {
        match self {
            InitialLaw::Normal { mean, .. } => mean.clone(),
            InitialLaw::Samples(s) => {
                let mut m = Vector::zeros(self.dim());
                for v in s {
                    m += v;
                }
                m / s.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `(C x + D u) dW`
    Multiplicative,
    /// `(C x + D u + σ 1) dW`; with `C = D = 0` this is the additive baseline.
    Additive { sigma: f64 },
}

impl NoiseModel {
    fn sigma(&self) -> f64 {
        match self {
            NoiseModel::Multiplicative => 0.0,
            NoiseModel::Additive { sigma } => *sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub agents: usize,
    /// Class index per agent; empty means every agent is in class 0.
    pub class_of: Vec<usize>,
    pub initial: InitialLaw,
    /// Target of the deviation statistics; defaults to the initial mean.
    pub reference: Option<Vector>,
    pub horizon: f64,
    pub dt: f64,
    pub replications: usize,
    pub seed: u64,
    pub noise: NoiseModel,
    /// Record every `stride`-th step; defaults to about 1000 recorded intervals.
    pub record_stride: Option<usize>,
    /// Agents whose full state and control paths are kept for every replication.
    pub tracked_agents: Vec<usize>,
    /// Keep all agents' paths for the first this-many replications.
    pub dump_replications: usize,
    /// Upper bound on the number of stored values in dumps.
    pub dump_limit: usize,
    /// Accumulate per-agent moments (`N × nodes` per replication).
    pub agent_statistics: bool,
    pub threads: Option<usize>,
}

impl SimulationConfig {
    pub fn new(agents: usize, initial: InitialLaw, horizon: f64, dt: f64, replications: usize, seed: u64) -> Self {
        Self {
            agents,
            class_of: Vec::new(),
            initial,
            reference: None,
            horizon,
            dt,
            replications,
            seed,
            noise: NoiseModel::Multiplicative,
            record_stride: None,
            tracked_agents: Vec::new(),
            dump_replications: 0,
            dump_limit: 50_000_000,
            agent_statistics: false,
            threads: None,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.dt)
    }

    pub fn reference(&self) -> Vector {
        self.reference.clone().unwrap_or_else(|| self.initial.mean())
    }

    pub fn class(&self, agent: usize) -> usize {
        if self.class_of.is_empty() {
            0
        } else {
            self.class_of[agent]
        }
    }

    pub fn stride(&self) -> Result<usize> {
        let steps = self.grid()?.steps();
        match self.record_stride {
            Some(s) if s == 0 || steps % s != 0 => Err(Error::InvalidParameter {
                name: "record_stride",
                reason: format!("{s} does not divide the {steps} steps"),
            }),
            Some(s) => Ok(s),
            None => {
                let target = (steps / 1000).max(1);
                Ok((1..=target).rev().find(|d| steps % d == 0).unwrap_or(1))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.agents == 0 {
            return bad("agents", "need at least one agent".into());
        }
        if self.replications == 0 {
            return bad("replications", "need at least one replication".into());
        }
        if self.agents > u32::MAX as usize || self.replications > u32::MAX as usize {
            return bad("agents", "agent and replication counts must fit in 32 bits".into());
        }
        self.grid()?;
        self.stride()?;
        if !self.class_of.is_empty() && self.class_of.len() != self.agents {
            return Err(Error::ClassMismatch(format!(
                "{} class labels for {} agents",
                self.class_of.len(),
                self.agents
            )));
        }
        if let Some(&i) = self.tracked_agents.iter().find(|&&i| i >= self.agents) {
            return bad("tracked_agents", format!("agent {i} out of range"));
        }
        if let NoiseModel::Additive { sigma } = self.noise {
            if !(sigma >= 0.0) {
                return bad("sigma", format!("must be nonnegative, got {sigma}"));
            }
        }
        match &self.initial {
            InitialLaw::Normal { mean, cov } => {
                if cov.shape() != (mean.len(), mean.len()) {
                    return Err(Error::Dimension("initial covariance does not match the mean".into()));
                }
            }
            InitialLaw::Samples(s) => {
                let ok = s.len() == self.agents || s.len() == self.agents * self.replications;
                if !ok || s.iter().any(|v| v.len() != self.initial.dim()) {
                    return Err(Error::Dimension(format!(
                        "need {} or {} initial samples of equal length",
                        self.agents,
                        self.agents * self.replications
                    )));
                }
            }
        }
        if let Some(r) = &self.reference {
            if r.len() != self.initial.dim() {
                return Err(Error::Dimension("reference has the wrong length".into()));
            }
        }
        let nodes = self.grid()?.steps() / self.stride()? + 1;
        let dump_size = self.dump_replications.min(self.replications) * self.agents * nodes * 2 * self.initial.dim();
        if dump_size > self.dump_limit {
            return bad(
                "dump_replications",
                format!("path dump would hold {dump_size} values, limit is {}", self.dump_limit),
            );
        }
        Ok(())
    }
}

/// `dx = (A x + B u) dt + (C x + D u + σ 1) dW` with flattened row-major blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDynamics {
    n: usize,
    r: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    sigma: f64,
}

fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl AgentDynamics {
    pub fn new(a: &Mat, b: &Mat, c: &Mat, d: &Mat, sigma: f64) -> Result<Self> {
        let n = a.nrows();
        let r = b.ncols();
        if !a.is_square() || b.nrows() != n || c.shape() != (n, n) || d.shape() != (n, r) {
            return Err(Error::Dimension("agent dynamics blocks are not conformable".into()));
        }
        Ok(Self {
            n,
            r,
            a: row_major(a),
            b: row_major(b),
            c: row_major(c),
            d: row_major(d),
            sigma,
        })
    }

    pub fn from_params(p: &GameParameters, noise: NoiseModel) -> Result<Self> {
        Self::new(&p.a, &p.b, &p.c, &p.d, noise.sigma())
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.r
    }
}

/// A (possibly time-varying) state feedback. `k` is the step index on the
/// simulation grid and `t` the matching time.
pub trait Policy: Sync {
    fn control(&self, k: usize, t: f64, x: &[f64], u: &mut [f64]);
}

impl<P: Policy + ?Sized> Policy for &P {
    fn control(&self, k: usize, t: f64, x: &[f64], u: &mut [f64]) {
        (**self).control(k, t, x, u)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn control(&self, k: usize, t: f64, x: &[f64], u: &mut [f64]) {
        (**self).control(k, t, x, u)
    }
}

/// `u = -G x - o_k` with the offset tabulated per simulation step (the
/// last entry is held beyond the table).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFeedback {
    n: usize,
    r: usize,
    gain: Vec<f64>,
    offsets: Vec<f64>,
}

impl AffineFeedback {
    pub fn constant(gain: &Mat, offset: &Vector) -> Self {
        Self {
            n: gain.ncols(),
            r: gain.nrows(),
            gain: row_major(gain),
            offsets: offset.as_slice().to_vec(),
        }
    }

    /// Offsets tabulated as an `r × (steps+1)` path.
    pub fn tabulated(gain: &Mat, offsets: &Mat) -> Self {
        Self {
            n: gain.ncols(),
            r: gain.nrows(),
            gain: row_major(gain),
            offsets: offsets.as_slice().to_vec(),
        }
    }

    pub fn from_strategy(strategy: &DecentralizedStrategy, class: usize, grid: &TimeGrid) -> Self {
        let gain = &strategy.classes[class].gain;
        let mut table = Mat::zeros(gain.nrows(), grid.len());
        for k in 0..grid.len() {
            table.set_column(k, &strategy.offset_at(class, grid.t(k)));
        }
        Self::tabulated(gain, &table)
    }
}

impl Policy for AffineFeedback {
    #[inline]
    fn control(&self, k: usize, _t: f64, x: &[f64], u: &mut [f64]) {
        let last = self.offsets.len() / self.r - 1;
        let o = &self.offsets[k.min(last) * self.r..][..self.r];
        for j in 0..self.r {
            let g = &self.gain[j * self.n..][..self.n];
            let mut acc = -o[j];
            for l in 0..self.n {
                acc -= g[l] * x[l];
            }
            u[j] = acc;
        }
    }
}

/// Euler–Maruyama path of one agent; `on_step(k, x_k, u_k)` sees every node.
#[inline]
fn run_agent<P: Policy + ?Sized>(
    dynamics: &AgentDynamics,
    policy: &P,
    stream: &mut NormalStream,
    grid: &TimeGrid,
    x: &mut [f64],
    u: &mut [f64],
    drift: &mut [f64],
    mut on_step: impl FnMut(usize, &[f64], &[f64]),
) {
    let (n, r) = (dynamics.n, dynamics.r);
    let dt = grid.dt();
    let sqdt = dt.sqrt();
    let steps = grid.steps();
    for k in 0..=steps {
        policy.control(k, grid.t(k), x, u);
        on_step(k, x, u);
        if k == steps {
            break;
        }
        let dw = sqdt * stream.next();
        for i in 0..n {
            let (a, c) = (&dynamics.a[i * n..][..n], &dynamics.c[i * n..][..n]);
            let (b, d) = (&dynamics.b[i * r..][..r], &dynamics.d[i * r..][..r]);
            let mut f = 0.0;
            let mut g = dynamics.sigma;
            for l in 0..n {
                f += a[l] * x[l];
                g += c[l] * x[l];
            }
            for l in 0..r {
                f += b[l] * u[l];
                g += d[l] * u[l];
            }
            drift[i] = f * dt + g * dw;
        }
        for i in 0..n {
            x[i] += drift[i];
        }
    }
}

/// Initial-state sampler with a precomputed square root of the covariance.
struct InitialSampler<'a> {
    law: &'a InitialLaw,
    root: Mat,
    key: [u32; 2],
    agents: usize,
}

impl<'a> InitialSampler<'a> {
    fn new(law: &'a InitialLaw, seed: u64, agents: usize) -> Result<Self> {
        let root = match law {
            InitialLaw::Normal { cov, .. } => {
                let sym = (cov + cov.transpose()) * 0.5;
                let eig = sym.clone().symmetric_eigen();
                let scale = sym.amax().max(1e-300);
                if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
                    return Err(Error::InvalidParameter {
                        name: "cov",
                        reason: "initial covariance is not positive semidefinite".into(),
                    });
                }
                let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * Mat::from_diagonal(&sq)
            }
            InitialLaw::Samples(_) => Mat::zeros(0, 0),
        };
        Ok(Self {
            law,
            root,
            key: rng::key_of(seed),
            agents,
        })
    }

    fn sample(&self, rep: usize, agent: usize, out: &mut [f64]) {
        match self.law {
            InitialLaw::Normal { mean, .. } => {
                let n = mean.len();
                let z: Vec<f64> = (0..n)
                    .map(|j| rng::normal_at(self.key, rep as u32, agent as u32, rng::DOMAIN_INITIAL, j as u32))
                    .collect();
                for i in 0..n {
                    let mut v = mean[i];
                    for j in 0..n {
                        v += self.root[(i, j)] * z[j];
                    }
                    out[i] = v;
                }
            }
            InitialLaw::Samples(s) => {
                let idx = if s.len() == self.agents { agent } else { rep * self.agents + agent };
                out.copy_from_slice(s[idx].as_slice());
            }
        }
    }
}

/// Paths of one agent across all kept replications.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedAgent {
    pub agent: usize,
    /// `n × nodes` per kept replication.
    pub states: Vec<Mat>,
    /// `r × nodes` per kept replication.
    pub controls: Vec<Mat>,
}

/// Paths of every agent in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDump {
    pub replication: usize,
    pub states: Vec<Mat>,
    pub controls: Vec<Mat>,
}

/// Recorded output of a population simulation. Statistics are stored at
/// the record nodes `times`; per-replication vectors are indexed like
/// `replications` (the kept replication ids).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub seed: u64,
    pub agents: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub grid: TimeGrid,
    pub record_stride: usize,
    pub times: Vec<f64>,
    pub reference: Vector,
    pub replications: Vec<usize>,
    pub excluded: Vec<usize>,
    /// `x^{(N)}` per replication, `n × nodes`.
    pub population_average: Vec<Mat>,
    /// `(1/N) Σ_i ‖x_i − x̄₀‖²` per replication and node.
    pub deviation_from_target: Vec<Vec<f64>>,
    /// `(1/N) Σ_i ‖x_i − x^{(N)}‖²` per replication and node.
    pub deviation_from_average: Vec<Vec<f64>>,
    /// `E(‖x_i‖² + ‖u_i‖²)`, `N × nodes`, when agent statistics are on.
    pub agent_energy: Option<Mat>,
    /// `E‖x_i − x̄₀‖²`, `N × nodes`, when agent statistics are on.
    pub agent_deviation: Option<Mat>,
    pub tracked: Vec<TrackedAgent>,
    pub dumps: Vec<PathDump>,
}

impl TrajectoryEnsemble {
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn kept(&self) -> usize {
        self.replications.len()
    }

    pub fn tracked_agent(&self, agent: usize) -> Option<&TrackedAgent> {
        self.tracked.iter().find(|t| t.agent == agent)
    }
}

struct RepOutput {
    rep: usize,
    finite: bool,
    average: Mat,
    dev_target: Vec<f64>,
    dev_average: Vec<f64>,
    tracked: Vec<(Mat, Mat)>,
    dump: Option<PathDump>,
}

struct ChunkOutput {
    reps: Vec<RepOutput>,
    energy: Vec<f64>,
    deviation: Vec<f64>,
}

struct Context<'a, P> {
    config: &'a SimulationConfig,
    dynamics: &'a [AgentDynamics],
    policies: &'a [P],
    grid: TimeGrid,
    stride: usize,
    nodes: usize,
    reference: Vector,
    sampler: InitialSampler<'a>,
    track_slot: Vec<Option<usize>>,
}

/// Replications per reduction unit. Fixed so that floating-point sums do
/// not depend on the number of worker threads.
const CHUNK: usize = 16;
/// Chunks evaluated between two sequential reductions.
const BATCH: usize = 8;

impl<'a, P: Policy> Context<'a, P> {
    fn run_rep(&self, rep: usize, energy: &mut [f64], deviation: &mut [f64]) -> RepOutput {
        let cfg = self.config;
        let n = self.dynamics[0].n;
        let r = self.dynamics[0].r;
        let nodes = self.nodes;
        let stride = self.stride;
        let stats = cfg.agent_statistics;
        let mut sum_x = vec![0.0; n * nodes];
        let mut dev = vec![0.0; nodes];
        let mut tracked: Vec<(Mat, Mat)> = cfg
            .tracked_agents
            .iter()
            .map(|_| (Mat::zeros(n, nodes), Mat::zeros(r, nodes)))
            .collect();
        let dumping = rep < cfg.dump_replications;
        let mut dump = dumping.then(|| PathDump {
            replication: rep,
            states: Vec::with_capacity(cfg.agents),
            controls: Vec::with_capacity(cfg.agents),
        });

        let mut x = vec![0.0; n];
        let mut u = vec![0.0; r];
        let mut scratch = vec![0.0; n];
        let reference = self.reference.as_slice();
        for agent in 0..cfg.agents {
            let class = cfg.class(agent);
            self.sampler.sample(rep, agent, &mut x);
            let mut stream = NormalStream::new(cfg.seed, rep, agent, rng::DOMAIN_NOISE);
            let slot = self.track_slot[agent];
            let mut own = dumping.then(|| (Mat::zeros(n, nodes), Mat::zeros(r, nodes)));
            run_agent(
                &self.dynamics[class],
                &self.policies[class],
                &mut stream,
                &self.grid,
                &mut x,
                &mut u,
                &mut scratch,
                |k, x, u| {
                    if k % stride != 0 {
                        return;
                    }
                    let j = k / stride;
                    let mut d0 = 0.0;
                    let mut xx = 0.0;
                    for i in 0..n {
                        sum_x[j * n + i] += x[i];
                        let e = x[i] - reference[i];
                        d0 += e * e;
                        xx += x[i] * x[i];
                    }
                    dev[j] += d0;
                    if stats {
                        let uu: f64 = u.iter().map(|v| v * v).sum();
                        energy[agent * nodes + j] = xx + uu;
                        deviation[agent * nodes + j] = d0;
                    }
                    if let Some(s) = slot {
                        let (xs, us) = &mut tracked[s];
                        xs.column_mut(j).copy_from_slice(x);
                        us.column_mut(j).copy_from_slice(u);
                    }
                    if let Some((xs, us)) = own.as_mut() {
                        xs.column_mut(j).copy_from_slice(x);
                        us.column_mut(j).copy_from_slice(u);
                    }
                },
            );
            if let (Some(d), Some((xs, us))) = (dump.as_mut(), own) {
                d.states.push(xs);
                d.controls.push(us);
            }
        }

        let count = cfg.agents as f64;
        let average = Mat::from_column_slice(n, nodes, &sum_x) / count;
        let dev_target: Vec<f64> = dev.iter().map(|d| d / count).collect();
        let dev_average: Vec<f64> = (0..nodes)
            .map(|j| {
                let off: f64 = (0..n).map(|i| (average[(i, j)] - reference[i]).powi(2)).sum();
                (dev_target[j] - off).max(0.0)
            })
            .collect();
        let finite = average.iter().all(|v| v.is_finite()) && dev_target.iter().all(|v| v.is_finite());
        RepOutput {
            rep,
            finite,
            average,
            dev_target,
            dev_average,
            tracked,
            dump,
        }
    }

    fn run_chunk(&self, reps: std::ops::Range<usize>) -> ChunkOutput {
        let size = if self.config.agent_statistics {
            self.config.agents * self.nodes
        } else {
            0
        };
        let mut energy = vec![0.0; size];
        let mut deviation = vec![0.0; size];
        let mut rep_energy = vec![0.0; size];
        let mut rep_deviation = vec![0.0; size];
        let mut out = Vec::with_capacity(reps.len());
        for rep in reps {
            let o = self.run_rep(rep, &mut rep_energy, &mut rep_deviation);
            if o.finite {
                for (acc, v) in energy.iter_mut().zip(&rep_energy) {
                    *acc += v;
                }
                for (acc, v) in deviation.iter_mut().zip(&rep_deviation) {
                    *acc += v;
                }
            }
            out.push(o);
        }
        ChunkOutput {
            reps: out,
            energy,
            deviation,
        }
    }
}

pub(crate) fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter {
                    name: "threads",
                    reason: e.to_string(),
                })?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Simulates `N` agents where agent `i` uses `policies[class(i)]` and
/// `dynamics[class(i)]`.
pub fn simulate_population<P: Policy>(
    config: &SimulationConfig,
    dynamics: &[AgentDynamics],
    policies: &[P],
) -> Result<TrajectoryEnsemble> {
    config.validate()?;
    let classes = config.class_of.iter().copied().max().map_or(1, |m| m + 1);
    if dynamics.len() < classes || policies.len() < classes {
        return Err(Error::ClassMismatch(format!(
            "{classes} classes assigned, {} dynamics and {} policies supplied",
            dynamics.len(),
            policies.len()
        )));
    }
    let n = config.initial.dim();
    let r = dynamics[0].r;
    if dynamics.iter().any(|d| d.n != n || d.r != r) {
        return Err(Error::Dimension("class dynamics disagree with the initial law".into()));
    }
    let grid = config.grid()?;
    let stride = config.stride()?;
    let nodes = grid.steps() / stride + 1;
    let mut track_slot = vec![None; config.agents];
    for (s, &a) in config.tracked_agents.iter().enumerate() {
        track_slot[a] = Some(s);
    }
    let ctx = Context {
        config,
        dynamics,
        policies,
        grid,
        stride,
        nodes,
        reference: config.reference(),
        sampler: InitialSampler::new(&config.initial, config.seed, config.agents)?,
        track_slot,
    };

    let total = config.replications;
    let chunks: Vec<std::ops::Range<usize>> = (0..total)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(total))
        .collect();

    let mut ens = TrajectoryEnsemble {
        seed: config.seed,
        agents: config.agents,
        state_dim: n,
        control_dim: r,
        grid,
        record_stride: stride,
        times: (0..nodes).map(|j| grid.t(j * stride)).collect(),
        reference: ctx.reference.clone(),
        replications: Vec::new(),
        excluded: Vec::new(),
        population_average: Vec::new(),
        deviation_from_target: Vec::new(),
        deviation_from_average: Vec::new(),
        agent_energy: None,
        agent_deviation: None,
        tracked: config
            .tracked_agents
            .iter()
            .map(|&agent| TrackedAgent {
                agent,
                states: Vec::new(),
                controls: Vec::new(),
            })
            .collect(),
        dumps: Vec::new(),
    };
    let size = if config.agent_statistics { config.agents * nodes } else { 0 };
    let mut energy = vec![0.0; size];
    let mut deviation = vec![0.0; size];

    with_pool(config.threads, || {
        for batch in chunks.chunks(BATCH) {
            let outs: Vec<ChunkOutput> = batch.par_iter().map(|c| ctx.run_chunk(c.clone())).collect();
            for chunk in outs {
                for (acc, v) in energy.iter_mut().zip(&chunk.energy) {
                    *acc += v;
                }
                for (acc, v) in deviation.iter_mut().zip(&chunk.deviation) {
                    *acc += v;
                }
                for rep in chunk.reps {
                    if !rep.finite {
                        ens.excluded.push(rep.rep);
                        continue;
                    }
                    ens.replications.push(rep.rep);
                    ens.population_average.push(rep.average);
                    ens.deviation_from_target.push(rep.dev_target);
                    ens.deviation_from_average.push(rep.dev_average);
                    for (t, (xs, us)) in ens.tracked.iter_mut().zip(rep.tracked) {
                        t.states.push(xs);
                        t.controls.push(us);
                    }
                    if let Some(d) = rep.dump {
                        ens.dumps.push(d);
                    }
                }
            }
        }
    })?;

    if ens.excluded.len() * 1000 > total {
        return Err(Error::BlowUp {
            excluded: ens.excluded.len(),
            total,
        });
    }
    if config.agent_statistics {
        let kept = ens.kept() as f64;
        // stored agent-major, so the column-major view is nodes × N
        ens.agent_energy = Some(Mat::from_column_slice(nodes, config.agents, &energy).transpose() / kept);
        ens.agent_deviation = Some(Mat::from_column_slice(nodes, config.agents, &deviation).transpose() / kept);
    }
    Ok(ens)
}

/// Closed loop of the decentralized strategy: agent `i` applies
/// `û_i = -G_θ x_i - o_θ(t)`.
pub fn simulate_closed_loop(
    config: &SimulationConfig,
    classes: &[GameParameters],
    strategy: &DecentralizedStrategy,
) -> Result<TrajectoryEnsemble> {
    if strategy.classes.len() != classes.len() {
        return Err(Error::ClassMismatch(format!(
            "strategy has {} classes, dynamics {}",
            strategy.classes.len(),
            classes.len()
        )));
    }
    let grid = config.grid()?;
    let dynamics: Vec<AgentDynamics> = classes
        .iter()
        .map(|p| AgentDynamics::from_params(p, config.noise))
        .collect::<Result<_>>()?;
    let policies: Vec<AffineFeedback> = (0..classes.len())
        .map(|c| AffineFeedback::from_strategy(strategy, c, &grid))
        .collect();
    simulate_population(config, &dynamics, &policies)
}

/// `dx_i = -k (x_i - target) dt + σ dW_i`.
pub fn simulate_additive_baseline(config: &SimulationConfig, gain: f64, target: &Vector) -> Result<TrajectoryEnsemble> {
    let NoiseModel::Additive { sigma } = config.noise else {
        return Err(Error::InvalidParameter {
            name: "noise",
            reason: "the additive baseline needs an additive noise model".into(),
        });
    };
    let n = target.len();
    let id = Mat::identity(n, n);
    let dynamics = AgentDynamics::new(&Mat::zeros(n, n), &id, &Mat::zeros(n, n), &Mat::zeros(n, n), sigma)?;
    let policy = AffineFeedback::constant(&(&id * gain), &(target * -gain));
    let mut cfg = config.clone();
    cfg.class_of.clear();
    simulate_population(&cfg, &[dynamics], &[policy])
}

/// Re-simulates agent `agent` of replication `rep` under `policy` with the
/// same initial state and noise as in [`simulate_population`]. Returns state
/// and control paths recorded every `stride` steps.
pub fn simulate_single_agent<P: Policy + ?Sized>(
    config: &SimulationConfig,
    dynamics: &AgentDynamics,
    policy: &P,
    agent: usize,
    rep: usize,
    stride: usize,
) -> Result<(Mat, Mat)> {
    let grid = config.grid()?;
    if stride == 0 || grid.steps() % stride != 0 {
        return Err(Error::InvalidParameter {
            name: "stride",
            reason: format!("{stride} does not divide {} steps", grid.steps()),
        });
    }
    let n = dynamics.n;
    let r = dynamics.r;
    let nodes = grid.steps() / stride + 1;
    let sampler = InitialSampler::new(&config.initial, config.seed, config.agents)?;
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; r];
    let mut scratch = vec![0.0; n];
    sampler.sample(rep, agent, &mut x);
    let mut stream = NormalStream::new(config.seed, rep, agent, rng::DOMAIN_NOISE);
    let mut xs = Mat::zeros(n, nodes);
    let mut us = Mat::zeros(r, nodes);
    run_agent(dynamics, policy, &mut stream, &grid, &mut x, &mut u, &mut scratch, |k, x, u| {
        if k % stride == 0 {
            xs.column_mut(k / stride).copy_from_slice(x);
            us.column_mut(k / stride).copy_from_slice(u);
        }
    });
    Ok((xs, us))
}
