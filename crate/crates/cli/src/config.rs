//! JSON experiment configuration and its conversion to library types.

use std::path::Path;

use mfg_noise_lab::linalg::{Mat, Vector};
use mfg_noise_lab::meanfield::{AgentClass, PicardOptions, TimeGrid};
use mfg_noise_lab::riccati::GameParameters;
use mfg_noise_lab::simkit::{InitialLaw, SimulationConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// A scalar (`1 × 1`) or a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn of(m: &Mat) -> Self {
        if m.shape() == (1, 1) {
            MatrixSpec::Scalar(m[(0, 0)])
        } else {
            MatrixSpec::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }

    pub fn to_mat(&self, name: &str) -> Result<Mat, ConfigError> {
        match self {
            MatrixSpec::Scalar(v) => Ok(Mat::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || cols == 0 {
                    return Err(field(name, "matrix is empty"));
                }
                if let Some(i) = rows.iter().position(|r| r.len() != cols) {
                    return Err(field(format!("{name}[{i}]"), format!("row has {} entries, expected {cols}", rows[i].len())));
                }
                Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub c: MatrixSpec,
    pub d: MatrixSpec,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub rho: f64,
    pub x0_mean: Vec<f64>,
}

impl ParamsConfig {
    pub fn of(p: &GameParameters) -> Self {
        Self {
            a: MatrixSpec::of(&p.a),
            b: MatrixSpec::of(&p.b),
            c: MatrixSpec::of(&p.c),
            d: MatrixSpec::of(&p.d),
            q: MatrixSpec::of(&p.q),
            r: MatrixSpec::of(&p.r),
            rho: p.rho,
            x0_mean: p.x0_mean.iter().copied().collect(),
        }
    }

    pub fn to_params(&self, prefix: &str) -> Result<GameParameters, ConfigError> {
        let m = |spec: &MatrixSpec, name: &str| spec.to_mat(&format!("{prefix}.{name}"));
        GameParameters::new(
            m(&self.a, "a")?,
            m(&self.b, "b")?,
            m(&self.c, "c")?,
            m(&self.d, "d")?,
            m(&self.q, "q")?,
            m(&self.r, "r")?,
            self.rho,
            Vector::from_vec(self.x0_mean.clone()),
        )
        .map_err(|e| field(prefix, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub label: String,
    pub weight: f64,
    pub params: ParamsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    pub covariance: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    pub agents: usize,
    pub horizon: f64,
    pub dt: f64,
    pub replications: usize,
    pub seed: u64,
    #[serde(default)]
    pub record_stride: Option<usize>,
    /// Replications whose full paths are written.
    #[serde(default = "one")]
    pub path_replications: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Step of the mean-field grid; its horizon follows the simulation.
    pub dt: f64,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let p = PicardOptions::default();
        Self {
            dt: 0.01,
            damping: p.damping,
            tol: p.tol,
            max_iter: p.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub sigma: f64,
    /// Feedback gain; when absent the first class's Riccati gain is used.
    #[serde(default)]
    pub gain: Option<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NashConfig {
    pub agent_counts: Vec<usize>,
    #[serde(default)]
    pub agent: usize,
    /// Constant offsets added to `û`.
    pub offsets: Vec<f64>,
    pub gains: Vec<f64>,
    pub feedback_offsets: Vec<f64>,
    pub bound: f64,
    pub refine_steps: usize,
    pub pilot_replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    pub rho: Vec<f64>,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ClosedLoop,
    AdditiveBaseline,
    NashSweep,
    RiccatiRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub classes: Vec<ClassConfig>,
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    #[serde(default)]
    pub nash: Option<NashConfig>,
    #[serde(default)]
    pub regression: Option<RegressionConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn game_parameters(&self) -> Result<Vec<GameParameters>, ConfigError> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| c.params.to_params(&format!("classes[{i}].params")))
            .collect()
    }

    pub fn agent_classes(&self) -> Result<Vec<AgentClass>, ConfigError> {
        let params = self.game_parameters()?;
        Ok(self
            .classes
            .iter()
            .zip(params)
            .map(|(c, p)| AgentClass::new(c.label.clone(), p, c.weight))
            .collect())
    }

    pub fn initial_law(&self) -> Result<InitialLaw, ConfigError> {
        let init = self.initial.as_ref().ok_or_else(|| field("initial", "required by this experiment"))?;
        let cov = init.covariance.to_mat("initial.covariance")?;
        let n = init.mean.len();
        if n == 0 || cov.shape() != (n, n) {
            return Err(field("initial.covariance", format!("must be {n}x{n} to match initial.mean")));
        }
        Ok(InitialLaw::Normal {
            mean: Vector::from_vec(init.mean.clone()),
            cov,
        })
    }

    /// Agents are assigned to classes in contiguous blocks sized by weight.
    pub fn class_assignment(&self) -> Vec<usize> {
        let n = self.simulation.agents;
        if self.classes.len() <= 1 {
            return Vec::new();
        }
        let total: f64 = self.classes.iter().map(|c| c.weight).sum();
        let mut out = Vec::with_capacity(n);
        let mut acc = 0.0;
        for (k, c) in self.classes.iter().enumerate() {
            acc += c.weight / total;
            let end = if k + 1 == self.classes.len() { n } else { (acc * n as f64).round() as usize };
            while out.len() < end.min(n) {
                out.push(k);
            }
        }
        out
    }

    pub fn simulation_config(&self, agents: usize) -> Result<SimulationConfig, ConfigError> {
        let s = &self.simulation;
        let mut cfg = SimulationConfig::new(agents, self.initial_law()?, s.horizon, s.dt, s.replications, s.seed);
        if agents == s.agents {
            cfg.class_of = self.class_assignment();
        }
        cfg.record_stride = s.record_stride;
        cfg.threads = threads_from_env();
        cfg.validate().map_err(|e| field("simulation", e.to_string()))?;
        Ok(cfg)
    }

    pub fn solver_grid(&self) -> Result<TimeGrid, ConfigError> {
        TimeGrid::new(self.simulation.horizon, self.solver.dt).map_err(|e| field("solver.dt", e.to_string()))
    }

    pub fn picard(&self) -> PicardOptions {
        PicardOptions {
            damping: self.solver.damping,
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
        }
    }

    /// Structural checks with field-level messages.
    pub fn check(&self) -> Result<(), ConfigError> {
        let s = &self.simulation;
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(field("simulation.horizon", "must be positive and finite"));
        }
        if !(s.dt > 0.0 && s.dt <= s.horizon) {
            return Err(field("simulation.dt", "must be positive and at most the horizon"));
        }
        if s.replications == 0 {
            return Err(field("simulation.replications", "must be positive"));
        }
        if !(self.solver.dt > 0.0) {
            return Err(field("solver.dt", "must be positive"));
        }
        match self.experiment {
            ExperimentKind::RiccatiRegression => {
                let r = self.regression.as_ref().ok_or_else(|| field("regression", "required by riccati-regression"))?;
                if r.rho.is_empty() || r.r.is_empty() {
                    return Err(field("regression", "grids must be non-empty"));
                }
            }
            kind => {
                if self.classes.is_empty() {
                    return Err(field("classes", "at least one class is required"));
                }
                for (i, c) in self.classes.iter().enumerate() {
                    if !(c.weight > 0.0) {
                        return Err(field(format!("classes[{i}].weight"), "must be positive"));
                    }
                }
                self.game_parameters()?;
                let law = self.initial_law()?;
                let dim = self.classes[0].params.x0_mean.len();
                if law.dim() != dim {
                    return Err(field("initial.mean", format!("has length {}, classes have state dimension {dim}", law.dim())));
                }
                if s.agents < 1 {
                    return Err(field("simulation.agents", "must be positive"));
                }
                if kind == ExperimentKind::AdditiveBaseline {
                    let b = self.baseline.as_ref().ok_or_else(|| field("baseline", "required by additive-baseline"))?;
                    if !(b.sigma >= 0.0) {
                        return Err(field("baseline.sigma", "must be nonnegative"));
                    }
                    if b.target.len() != dim {
                        return Err(field("baseline.target", format!("must have length {dim}")));
                    }
                }
                if kind == ExperimentKind::NashSweep {
                    let n = self.nash.as_ref().ok_or_else(|| field("nash", "required by nash-sweep"))?;
                    if n.agent_counts.is_empty() || n.agent_counts.iter().any(|&c| c < 2 || n.agent >= c) {
                        return Err(field("nash.agent_counts", "each count must be at least 2 and exceed nash.agent"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Worker cap from `MFG_NOISE_LAB_THREADS`.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("MFG_NOISE_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
}
