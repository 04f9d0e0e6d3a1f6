//! Batch experiments: a JSON config names one of five experiment kinds, and
//! a run produces CSV/JSON artifacts plus a manifest.
//!
//! Every artifact is computed in memory before anything touches the disk,
//! then written through a temporary file and a rename. The manifest goes
//! last, so a directory with a manifest is a complete run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{self, BoundInputs, Measurement};
use crate::discrete::{run_fedavg, FedAvgConfig, FedAvgRun};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BoxDomain, Client, ClientLoss, Problem, WeightVector};
use crate::quadratic::{AnalyticSolution, CovarianceMode, QuadraticCase1D};
use crate::rng::{Purpose, StreamKey};
use crate::schedule::Schedule;
use crate::sde::{estimate_moments, integrate, IntegratorConfig};
use crate::stats::{normality_report, TimeSampler};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SimulateDiscrete,
    SimulateSde,
    AnalyticQuadratic,
    CheckNormality,
    CheckBounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossSpec {
    Quadratic { hessian: Vec<Vec<f64>>, center: Vec<f64> },
    SyntheticSmooth { hessian: Vec<Vec<f64>>, center: Vec<f64>, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub weight: f64,
    pub loss: LossSpec,
    pub noise_covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub clients: Vec<ClientSpec>,
}

fn matrix(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err("matrix must be square".into());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("matrix has non-finite entries".into());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn check_psd_matrix(what: &str, k: usize, rows: &[Vec<f64>], dim: usize, out: &mut Vec<String>) {
    match matrix(rows) {
        Err(e) => out.push(format!("client {k}: {what}: {e}")),
        Ok(m) if m.nrows() != dim => out.push(format!("client {k}: {what} is {}x{0}, expected {dim}x{dim}", m.nrows())),
        Ok(m) => {
            if let Err(e) = linalg::check_symmetric(&m) {
                out.push(format!("client {k}: {what}: {e}"));
            } else if let Err(e) = linalg::check_psd(&m) {
                out.push(format!("client {k}: {what} violates PSD: {e}"));
            }
        }
    }
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.clients.first().map_or(0, |c| match &c.loss {
            LossSpec::Quadratic { center, .. } | LossSpec::SyntheticSmooth { center, .. } => center.len(),
        })
    }

    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.clients.is_empty() {
            out.push("problem needs at least one client".into());
            return out;
        }
        let dim = self.dim();
        if dim == 0 {
            out.push("dimension must be >= 1".into());
        }
        let total: f64 = self.clients.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            out.push(format!("client weights sum to {total}, expected 1"));
        }
        for (k, c) in self.clients.iter().enumerate() {
            if !(c.weight.is_finite() && (0.0..=1.0).contains(&c.weight)) {
                out.push(format!("client {k}: weight must be in [0, 1], got {}", c.weight));
            }
            let (hessian, center) = match &c.loss {
                LossSpec::Quadratic { hessian, center } => (hessian, center),
                LossSpec::SyntheticSmooth { hessian, center, amplitude } => {
                    if !(amplitude.is_finite() && *amplitude >= 0.0) {
                        out.push(format!("client {k}: amplitude must be >= 0, got {amplitude}"));
                    }
                    (hessian, center)
                }
            };
            if center.len() != dim {
                out.push(format!("client {k}: center has dimension {}, expected {dim}", center.len()));
            }
            if center.iter().any(|v| !v.is_finite()) {
                out.push(format!("client {k}: center must be finite"));
            }
            check_psd_matrix("hessian", k, hessian, dim, &mut out);
            check_psd_matrix("noise covariance", k, &c.noise_covariance, dim, &mut out);
        }
        out
    }

    pub fn build(&self) -> Result<Problem> {
        let d = self.diagnostics();
        if !d.is_empty() {
            return Err(Error::Config(d));
        }
        let clients = self
            .clients
            .iter()
            .map(|c| {
                let loss = match &c.loss {
                    LossSpec::Quadratic { hessian, center } => ClientLoss::quadratic(matrix(hessian).expect("checked"), DVector::from_vec(center.clone()))?,
                    LossSpec::SyntheticSmooth { hessian, center, amplitude } => {
                        ClientLoss::synthetic_smooth(matrix(hessian).expect("checked"), DVector::from_vec(center.clone()), *amplitude)?
                    }
                };
                Client::new(c.weight, loss, matrix(&c.noise_covariance).expect("checked"))
            })
            .collect::<Result<Vec<_>>>()?;
        Problem::new(clients)
    }
}

/// [`FedAvgConfig`] without the seed, which lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgSpec {
    pub local_steps: usize,
    pub lift: f64,
    pub client_schedule: Schedule,
    pub server_schedule: Schedule,
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl FedAvgSpec {
    pub fn to_config(&self, seed: u64) -> FedAvgConfig {
        FedAvgConfig {
            local_steps: self.local_steps,
            lift: self.lift,
            client_schedule: self.client_schedule,
            server_schedule: self.server_schedule,
            rounds: self.rounds,
            seed,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSpec {
    pub horizon: f64,
    pub inner_replicates: usize,
    pub paths: usize,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticSpec {
    pub case: QuadraticCase1D,
    #[serde(default)]
    pub mode: CovarianceMode,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalitySpec {
    /// Time at which the server state is frozen.
    pub t: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Non-convex bound on the time-averaged `‖∇F‖²`.
    Theorem1,
    /// Weakly quasi-convex bound on the time-averaged `F − F*`.
    Theorem2,
    /// Constant client rate, decaying server rate.
    Corollary2,
}

fn default_tau() -> f64 {
    1.0
}
fn default_vstar_states() -> usize {
    8
}
fn default_vstar_replicates() -> usize {
    256
}
fn default_wqc_probes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSpec {
    pub bound: BoundKind,
    /// Independent FedAvg runs.
    pub runs: usize,
    /// Random time points per run.
    pub time_draws: usize,
    pub checkpoints: Vec<f64>,
    /// Box over which `L`, `μ` are computed.
    pub domain: BoxDomain,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// States along the first run at which `V̂` is estimated.
    #[serde(default = "default_vstar_states")]
    pub vstar_states: usize,
    #[serde(default = "default_vstar_replicates")]
    pub vstar_replicates: usize,
    #[serde(default = "default_wqc_probes")]
    pub wqc_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Mandatory; there is no wall-clock default.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedavg: Option<FedAvgSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sde: Option<SdeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<AnalyticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normality: Option<NormalitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

fn require<'a, T>(section: &'a Option<T>, name: &str, kind: ExperimentKind, out: &mut Vec<String>) -> Option<&'a T> {
    if section.is_none() {
        out.push(format!("{} requires the `{name}` section", serde_json::to_value(kind).expect("kind").as_str().expect("str")));
    }
    section.as_ref()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config does not parse: {e}")]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Every violated constraint; empty means runnable.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let kind = self.kind;
        let needs_problem = kind != ExperimentKind::AnalyticQuadratic;
        if needs_problem {
            let problem = require(&self.problem, "problem", kind, &mut out);
            let fedavg = require(&self.fedavg, "fedavg", kind, &mut out);
            if let Some(p) = problem {
                out.extend(p.diagnostics());
                match &self.w_init {
                    None => out.push("`w_init` is required".into()),
                    Some(w) if w.len() != p.dim() => out.push(format!("w_init has dimension {}, expected {}", w.len(), p.dim())),
                    Some(w) if w.iter().any(|v| !v.is_finite()) => out.push("w_init must be finite".into()),
                    _ => {}
                }
            }
            if let Some(f) = fedavg {
                out.extend(f.to_config(self.seed).diagnostics());
            }
        }
        match kind {
            ExperimentKind::SimulateDiscrete => {}
            ExperimentKind::SimulateSde => {
                if let Some(s) = require(&self.sde, "sde", kind, &mut out) {
                    let h = self.fedavg.as_ref().map_or(1.0, |f| f.lift);
                    out.extend(self.integrator(s).diagnostics(h));
                }
            }
            ExperimentKind::AnalyticQuadratic => {
                if let Some(q) = require(&self.quadratic, "quadratic", kind, &mut out) {
                    out.extend(q.case.diagnostics());
                    if q.times.is_empty() {
                        out.push("quadratic.times must not be empty".into());
                    }
                    if q.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                        out.push("quadratic.times must be finite and >= 0".into());
                    }
                }
            }
            ExperimentKind::CheckNormality => {
                if let Some(n) = require(&self.normality, "normality", kind, &mut out) {
                    if !(n.t.is_finite() && n.t >= 0.0) {
                        out.push(format!("normality.t must be >= 0, got {}", n.t));
                    }
                    if n.replicates < 100 {
                        out.push("normality.replicates must be >= 100".into());
                    }
                    if self.problem.as_ref().is_some_and(|p| p.clients.len() < 2) {
                        out.push("the normality check needs >= 2 clients".into());
                    }
                }
            }
            ExperimentKind::CheckBounds => {
                if let Some(b) = require(&self.bounds, "bounds", kind, &mut out) {
                    self.bound_diagnostics(b, &mut out);
                }
            }
        }
        out
    }

    fn bound_diagnostics(&self, b: &BoundSpec, out: &mut Vec<String>) {
        if b.runs < 2 {
            out.push("bounds.runs must be >= 2".into());
        }
        if b.time_draws < 1 {
            out.push("bounds.time_draws must be >= 1".into());
        }
        if b.checkpoints.is_empty() {
            out.push("bounds.checkpoints must not be empty".into());
        }
        if b.checkpoints.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            out.push("bounds.checkpoints must be finite and > 0".into());
        }
        if !(b.tau.is_finite() && b.tau > 0.0) {
            out.push(format!("bounds.tau must be > 0, got {}", b.tau));
        }
        if b.vstar_states < 1 || b.vstar_replicates < 2 {
            out.push("bounds.vstar_states must be >= 1 and bounds.vstar_replicates >= 2".into());
        }
        if let Err(e) = b.domain.validate() {
            out.push(format!("bounds.domain: {e}"));
        }
        if let Some(p) = &self.problem {
            if b.domain.dim() != p.dim() {
                out.push(format!("bounds.domain has dimension {}, expected {}", b.domain.dim(), p.dim()));
            }
        }
        let Some(f) = &self.fedavg else { return };
        let horizon = f.rounds as f64 * f.lift;
        if let Some(t) = b.checkpoints.iter().copied().find(|&t| t > horizon + 1e-9) {
            out.push(format!("checkpoint {t} exceeds rounds·h = {horizon}"));
        }
        match b.bound {
            BoundKind::Theorem1 | BoundKind::Theorem2 => {
                if !matches!(f.server_schedule, Schedule::Constant { .. }) {
                    out.push("theorem bounds need a constant server schedule".into());
                }
            }
            BoundKind::Corollary2 => {
                if !matches!(f.client_schedule, Schedule::Constant { .. }) {
                    out.push("corollary2 needs a constant client schedule".into());
                }
                if f.server_schedule != Schedule::harmonic() {
                    out.push("corollary2 needs the server schedule 1/(t+1)".into());
                }
            }
        }
        if b.bound == BoundKind::Theorem2 && b.wqc_probes < 1 {
            out.push("bounds.wqc_probes must be >= 1".into());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d))
        }
    }

    fn integrator(&self, s: &SdeSpec) -> IntegratorConfig {
        IntegratorConfig {
            horizon: s.horizon,
            inner_replicates: s.inner_replicates,
            paths: s.paths,
            seed: self.seed,
            checkpoints: s.checkpoints.clone(),
        }
    }

    fn fedavg_config(&self) -> FedAvgConfig {
        self.fedavg.as_ref().expect("validated").to_config(self.seed)
    }

    fn w_init(&self) -> Result<WeightVector> {
        WeightVector::new(self.w_init.clone().expect("validated"))
    }
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(&fs::read_to_string(path)?)
}

/// Diagnostics for the config at `path`; only an unreadable file is an error.
pub fn validate_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(match ExperimentConfig::from_json(&text) {
        Ok(c) => c.diagnostics(),
        Err(Error::Config(d)) => d,
        Err(e) => vec![e.to_string()],
    })
}

/// A named output held in memory until the run succeeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    fn new(name: &str, contents: String) -> Self {
        Self { name: name.into(), contents }
    }

    fn json<T: Serialize>(name: &str, value: &T) -> Self {
        let mut s = serde_json::to_string_pretty(value).expect("report serializes");
        s.push('\n');
        Self::new(name, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: Vec<ArtifactEntry>,
    pub tool_version: String,
    pub runtime_seconds: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the experiment and returns its artifacts without writing anything.
pub fn execute(config: &ExperimentConfig) -> Result<Vec<Artifact>> {
    config.validate()?;
    match config.kind {
        ExperimentKind::SimulateDiscrete => {
            let problem = config.problem.as_ref().expect("validated").build()?;
            let traj = run_fedavg(&problem, &config.fedavg_config(), &config.w_init()?)?;
            Ok(vec![Artifact::new("trajectory.csv", traj.to_csv())])
        }
        ExperimentKind::SimulateSde => {
            let problem = config.problem.as_ref().expect("validated").build()?;
            let ic = config.integrator(config.sde.as_ref().expect("validated"));
            let ens = integrate(&problem, &ic, &config.fedavg_config(), &config.w_init()?)?;
            Ok(vec![Artifact::new("paths.csv", ens.to_csv()), Artifact::json("summary.json", &ens.summary_json())])
        }
        ExperimentKind::AnalyticQuadratic => {
            let q = config.quadratic.as_ref().expect("validated");
            let sol = AnalyticSolution::new(&q.case, q.mode)?;
            let summary = serde_json::json!({
                "solution": sol,
                "stationary_mean": sol.c4,
                "stationary_variance": sol.stationary_variance(),
                "global_minimizer": q.case.global_minimizer(),
                "warnings": q.case.contraction_warnings(),
            });
            Ok(vec![Artifact::new("analytic.csv", sol.to_csv(&q.times)), Artifact::json("coefficients.json", &summary)])
        }
        ExperimentKind::CheckNormality => {
            let problem = config.problem.as_ref().expect("validated").build()?;
            let n = config.normality.as_ref().expect("validated");
            let report = normality_report(&problem, &config.fedavg_config(), &config.w_init()?, n.t, n.replicates)?;
            Ok(vec![Artifact::json("normality.json", &report)])
        }
        ExperimentKind::CheckBounds => {
            let summary = check_bounds(config)?;
            Ok(vec![Artifact::new("bounds.csv", summary.report.to_csv()), Artifact::json("bounds.json", &summary)])
        }
    }
}

/// Everything a bound check measured and evaluated.
#[derive(Debug, Clone, Serialize)]
pub struct BoundSummary {
    pub bound: BoundKind,
    pub inputs: BoundInputs,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Estimated, not the true supremum.
    pub v_star_estimate: f64,
    pub optimum_loss: f64,
    /// Fraction of recorded server states outside the box.
    pub states_outside_domain: f64,
    pub wqc: Option<crate::model::WqcReport>,
    /// Alternative right-hand sides evaluated at the same checkpoints.
    pub alternatives: Vec<(String, Vec<f64>)>,
    pub report: bounds::BoundReport,
}

/// Runs a `check-bounds` config and returns the comparison.
pub fn check_bounds(config: &ExperimentConfig) -> Result<BoundSummary> {
    config.validate()?;
    if config.kind != ExperimentKind::CheckBounds {
        return Err(Error::InvalidArgument("config kind is not check-bounds".into()));
    }
    let spec = config.bounds.as_ref().expect("validated");
    let problem = config.problem.as_ref().expect("validated").build()?;
    let fedavg = config.fedavg_config();
    let w_init = config.w_init()?;
    let smooth = problem.smoothness_constants(&spec.domain)?;

    let w_star = if problem.is_quadratic() {
        problem.quadratic_global_minimizer()?
    } else {
        problem.local_minimizer(&w_init, 1e-12, 100_000)?
    };
    let f_star = problem.loss(w_star.as_slice());
    let dist = (w_init.as_vector() - w_star.as_vector()).norm();

    // independent runs; keep only the scalar series
    let run_seed = |r: usize| StreamKey::new(config.seed, Purpose::Trajectory).replicate(r as u64).hash();
    let runs: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..spec.runs)
        .into_par_iter()
        .map(|r| {
            let cfg = FedAvgConfig { seed: run_seed(r), ..fedavg.clone() };
            let (mut grad, mut gap, mut outside) = (Vec::new(), Vec::new(), 0);
            for rec in FedAvgRun::new(&problem, &cfg, &w_init)? {
                let rec = rec?;
                grad.push(rec.grad_norm_sq);
                gap.push(rec.loss - f_star);
                outside += usize::from(!spec.domain.contains(rec.server.as_slice()));
            }
            Ok((grad, gap, outside))
        })
        .collect::<Result<_>>()?;
    let total_states: usize = runs.iter().map(|r| r.0.len()).sum();
    let outside = runs.iter().map(|r| r.2).sum::<usize>() as f64 / total_states as f64;

    // V* from moment estimates along the first run
    let first = run_fedavg(&problem, &FedAvgConfig { seed: run_seed(0), ..fedavg.clone() }, &w_init)?;
    let mut vstar = bounds::VStarEstimator::default();
    for s in 0..spec.vstar_states {
        let round = s * fedavg.rounds / spec.vstar_states.max(1);
        let t = fedavg.time_of_round(round);
        let m = estimate_moments(&first.records[round].server, &problem, &fedavg, t, spec.vstar_replicates)?;
        vstar.observe(&m, fedavg.client_schedule.value(t))?;
    }

    let server_rate = match fedavg.server_schedule {
        Schedule::Constant { value } => value,
        _ => 1.0,
    };
    let inputs = BoundInputs::from_problem(
        &problem,
        smooth.lipschitz,
        smooth.smoothness,
        fedavg.local_steps,
        fedavg.lift,
        vstar.estimate,
        problem.loss(w_init.as_slice()) - f_star,
        dist,
        spec.tau,
        server_rate,
    );

    let wqc = if spec.bound == BoundKind::Theorem2 {
        let mut rng = StreamKey::new(config.seed, Purpose::Calibration).rng();
        let probes = (0..spec.wqc_probes)
            .map(|_| WeightVector::new(spec.domain.lower.iter().zip(&spec.domain.upper).map(|(l, u)| rng.gen_range(*l..=*u)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Some(problem.wqc_check(&w_star, spec.tau, &probes)?)
    } else {
        None
    };

    let sampler_schedule = match spec.bound {
        BoundKind::Corollary2 => fedavg.server_schedule,
        _ => fedavg.client_schedule,
    };
    let mut measured = Vec::new();
    let mut rhs = Vec::new();
    let mut alternatives: Vec<(String, Vec<f64>)> = Vec::new();
    for (c, &t) in spec.checkpoints.iter().enumerate() {
        let sampler = TimeSampler::new(sampler_schedule, t)?;
        let per_run = runs
            .par_iter()
            .enumerate()
            .map(|(r, (grad, gap, _))| {
                let series = if spec.bound == BoundKind::Theorem2 { gap } else { grad };
                let mut rng = StreamKey::new(config.seed, Purpose::TimeSample).replicate(r as u64).round(c as u64).rng();
                bounds::time_averaged(series, fedavg.lift, &sampler, spec.time_draws, &mut rng)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, standard_error) = bounds::mean_and_se(&per_run);
        measured.push(Measurement { t, mean, standard_error });
        let (value, alt) = match spec.bound {
            BoundKind::Theorem1 => (bounds::theorem1_rhs(&inputs, &fedavg.client_schedule, t)?, None),
            BoundKind::Theorem2 => {
                let v = bounds::theorem2_rhs(&inputs, &fedavg.client_schedule, t)?;
                let alt = (fedavg.client_schedule == Schedule::harmonic()).then(|| bounds::corollary4_rhs(&inputs, t)).transpose()?;
                (v, alt.map(|a| ("corollary4_displayed", a.displayed)))
            }
            BoundKind::Corollary2 => {
                let eta_c = fedavg.client_schedule.value(0.0);
                let c2 = bounds::corollary2_rhs(&inputs, eta_c, t)?;
                (c2.displayed, Some(("derived", c2.derived)))
            }
        };
        if !value.is_finite() {
            return Err(Error::NumericalAbort { at: format!("t = {t}"), detail: "bound evaluated to a non-finite value".into() });
        }
        rhs.push((t, value));
        if let Some((name, v)) = alt {
            match alternatives.iter_mut().find(|(n, _)| n == name) {
                Some((_, vs)) => vs.push(v),
                None => alternatives.push((name.into(), vec![v])),
            }
        }
    }
    let report = bounds::compare_bound(&measured, &rhs)?;
    let summary = BoundSummary {
        bound: spec.bound,
        c1: inputs.c1(),
        c2: inputs.c2(),
        c3: inputs.c3(),
        v_star_estimate: vstar.estimate,
        optimum_loss: f_star,
        states_outside_domain: outside,
        inputs,
        wqc,
        alternatives,
        report,
    };
    Ok(summary)
}

fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, dir.join(name)).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Writes `artifacts` then the manifest into `dir`.
pub fn write_artifacts(dir: &Path, config: &ExperimentConfig, artifacts: &[Artifact], started: Instant) -> Result<RunManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        write_atomic(dir, &a.name, a.contents.as_bytes())?;
        entries.push(ArtifactEntry { name: a.name.clone(), bytes: a.contents.len(), sha256: hex(&Sha256::digest(a.contents.as_bytes())) });
    }
    let manifest = RunManifest {
        kind: config.kind,
        seed: config.seed,
        config_sha256: config.hash(),
        artifacts: entries,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(dir, MANIFEST_NAME, text.as_bytes())?;
    Ok(manifest)
}

/// Output directory: the override, else the config's, else `out`.
pub fn output_dir(config: &ExperimentConfig, overridden: Option<&Path>) -> PathBuf {
    overridden.map(Path::to_path_buf).or_else(|| config.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

/// Validates, executes and writes. Nothing is written on failure.
pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let artifacts = execute(config)?;
    write_artifacts(out, config, &artifacts, started)
}

/// Process exit status for an error: 2 for invalid input, 3 for a
/// numerical abort, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::NotSymmetric(_)
        | Error::NotPsd(_)
        | Error::WeightsNotNormalized(_)
        | Error::Json(_) => 2,
        Error::NumericalAbort { .. } | Error::NonFinite(_) | Error::Singular | Error::DegenerateSample(_) => 3,
        Error::Io(_) => 1,
    }
}
