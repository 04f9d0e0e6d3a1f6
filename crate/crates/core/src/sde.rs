//! The diffusion limit of FedAvg and a generic Euler–Maruyama integrator.
//!
//! The server weights follow `dw = η₀(t)·M̂(w) dt + η₀(t)·√h·V̂^{1/2}(w) dB`
//! where `M̂` and `V̂` are the mean and covariance of the aggregated update
//! `A` at `w`. With step `h`, one Euler–Maruyama step reproduces one
//! discrete round in mean and covariance.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrete::{FedAvgConfig, Rollout};
use crate::error::{invalid, Error, Result};
use crate::format::CsvTable;
use crate::linalg::{matvec_into, psd_sqrt, PsdRoot};
use crate::model::{Problem, WeightVector};
use crate::rng::{time_key, Purpose, StreamKey};

/// Replicates per deterministic block; blocks are merged in index order so
/// results do not depend on the thread count.
const BLOCK: usize = 512;

/// Monte Carlo estimate of the drift and diffusion at one server state.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    /// `M̂`, before the `η₀` scaling.
    pub mean: WeightVector,
    /// `V̂`, unbiased sample covariance.
    pub covariance: DMatrix<f64>,
    /// Symmetric root with `root·rootᵀ = V̂`.
    pub covariance_sqrt: DMatrix<f64>,
    pub replicates: usize,
    /// Standard error of each coordinate of `M̂`.
    pub standard_errors: Vec<f64>,
    /// Total magnitude of negative eigenvalues clamped to zero.
    pub clamped: f64,
}

/// Streaming mean and scatter matrix (Welford, with Chan's merge).
#[derive(Debug, Clone)]
pub(crate) struct MomentAccumulator {
    n: usize,
    mean: Vec<f64>,
    scatter: Vec<f64>,
    delta: Vec<f64>,
}

impl MomentAccumulator {
    pub(crate) fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], scatter: vec![0.0; dim * dim], delta: vec![0.0; dim] }
    }

    pub(crate) fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.scatter.iter_mut().for_each(|v| *v = 0.0);
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, dl), &xi) in self.mean.iter_mut().zip(self.delta.iter_mut()).zip(x) {
            *dl = xi - *m;
            *m += *dl * inv;
        }
        // scatter += δ·(x − mean_new)ᵀ
        for j in 0..d {
            let after = x[j] - self.mean[j];
            let col = &mut self.scatter[j * d..(j + 1) * d];
            for (s, dl) in col.iter_mut().zip(&self.delta) {
                *s += dl * after;
            }
        }
    }

    pub(crate) fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            self.n = other.n;
            self.mean.copy_from_slice(&other.mean);
            self.scatter.copy_from_slice(&other.scatter);
            return;
        }
        let d = self.mean.len();
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for ((dl, a), b) in self.delta.iter_mut().zip(&self.mean).zip(&other.mean) {
            *dl = b - a;
        }
        let w = na * nb / n;
        for j in 0..d {
            for i in 0..d {
                self.scatter[j * d + i] += other.scatter[j * d + i] + self.delta[i] * self.delta[j] * w;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&self.delta) {
            *m += dl * nb / n;
        }
        self.n += other.n;
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased covariance, symmetrized.
    pub(crate) fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        let s = DMatrix::from_column_slice(d, d, &self.scatter) / (self.n as f64 - 1.0);
        (&s + s.transpose()) * 0.5
    }

    pub(crate) fn estimate(&self) -> Result<MomentEstimate> {
        if self.n < 2 {
            return Err(Error::DegenerateSample("moment estimate needs at least 2 replicates".into()));
        }
        let covariance = self.covariance();
        let PsdRoot { root, clamped } = psd_sqrt(&covariance)?;
        let n = self.n as f64;
        let standard_errors = covariance.diagonal().iter().map(|v| (v.max(0.0) / n).sqrt()).collect();
        Ok(MomentEstimate {
            mean: WeightVector::new(self.mean.clone()).map_err(|_| Error::NonFinite("moment mean".into()))?,
            covariance,
            covariance_sqrt: root,
            replicates: self.n,
            standard_errors,
            clamped,
        })
    }
}

/// Symmetric PSD square root; eigenvalues in `[-1e-10, 0)` are clamped.
pub fn matrix_sqrt_psd(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    psd_sqrt(v).map(|r| r.root)
}

/// Accumulates `replicates` draws of `A` keyed by `base.replicate(r)`.
#[allow(clippy::too_many_arguments)]
fn accumulate_draws(
    problem: &Problem,
    w0: &[f64],
    rate: f64,
    steps: usize,
    clip: Option<f64>,
    base: StreamKey,
    range: std::ops::Range<usize>,
    rollout: &mut Rollout,
    total: &mut [f64],
    acc: &mut MomentAccumulator,
) {
    for r in range {
        rollout.server_update(problem, w0, rate, steps, clip, base.replicate(r as u64), total, None, |_, _, _| {});
        acc.push(total);
    }
}

/// Mean and unbiased covariance of `replicates` draws of `A` at `w0` and
/// time `t`. Uses exactly the draws that `discrete::sample_a` returns for the
/// same arguments.
pub fn estimate_moments(w0: &WeightVector, problem: &Problem, config: &FedAvgConfig, t: f64, replicates: usize) -> Result<MomentEstimate> {
    config.validate()?;
    if replicates < 2 {
        return Err(invalid("moment estimation needs R_inner >= 2"));
    }
    if w0.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: w0.dim() });
    }
    let d = problem.dim();
    let rate = config.client_schedule.value(t);
    let base = StreamKey::new(config.seed, Purpose::ServerUpdate).round(time_key(t));
    let blocks: Vec<MomentAccumulator> = (0..replicates.div_ceil(BLOCK))
        .into_par_iter()
        .map_init(
            || (Rollout::new(d), vec![0.0; d]),
            |(rollout, total), b| {
                let mut acc = MomentAccumulator::new(d);
                let range = b * BLOCK..((b + 1) * BLOCK).min(replicates);
                accumulate_draws(problem, w0.as_slice(), rate, config.local_steps, config.clip_norm, base, range, rollout, total, &mut acc);
                acc
            },
        )
        .collect();
    let mut acc = MomentAccumulator::new(d);
    for b in &blocks {
        acc.merge(b);
    }
    acc.estimate()
}

/// An Itô process `dX = f(t, X) dt + σ(t, X) dB` with `d`-dimensional `B`.
pub trait DiffusionProcess: Sync {
    /// Per-worker buffers reused across steps.
    type Scratch: Send;

    fn dim(&self) -> usize;

    fn scratch(&self) -> Self::Scratch;

    /// Writes `f(t, x)` into `drift` and `σ(t, x)` (d×d) into `diffusion`.
    /// `path` and `step` identify the call for processes that draw their
    /// own randomness.
    #[allow(clippy::too_many_arguments)]
    fn coefficients(
        &self,
        t: f64,
        x: &[f64],
        path: usize,
        step: usize,
        scratch: &mut Self::Scratch,
        drift: &mut [f64],
        diffusion: &mut DMatrix<f64>,
    ) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub horizon: f64,
    /// `R_inner`, draws of `A` per moment estimate.
    pub inner_replicates: usize,
    /// `R_paths`.
    pub paths: usize,
    pub seed: u64,
    /// Times at which path states are recorded; empty means the horizon only.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
}

impl IntegratorConfig {
    pub fn diagnostics(&self, h: f64) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.horizon.is_finite() && self.horizon >= h) {
            out.push(format!("horizon must be >= h (horizon = {}, h = {h})", self.horizon));
        }
        if self.inner_replicates < 2 {
            out.push("inner_replicates must be >= 2".into());
        }
        if self.paths < 1 {
            out.push("paths must be >= 1".into());
        }
        for &c in &self.checkpoints {
            if !(c.is_finite() && c >= 0.0 && c <= self.horizon + 1e-12) {
                out.push(format!("checkpoint {c} outside [0, horizon]"));
            }
        }
        out
    }
}

/// States of every path at every checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub dim: usize,
    pub paths: usize,
    /// Checkpoint times, snapped to the step grid.
    pub times: Vec<f64>,
    /// `states[(p·times.len() + c)·dim + j]`.
    pub states: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub t: f64,
    pub mean: Vec<f64>,
    /// Unbiased ensemble variance per coordinate.
    pub variance: Vec<f64>,
    /// Standard error of the ensemble mean per coordinate.
    pub standard_error: Vec<f64>,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, checkpoint: usize) -> &[f64] {
        let i = (path * self.times.len() + checkpoint) * self.dim;
        &self.states[i..i + self.dim]
    }

    /// Coordinate `j` of every path at `checkpoint`.
    pub fn coordinate(&self, checkpoint: usize, j: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.state(p, checkpoint)[j]).collect()
    }

    pub fn summary(&self) -> Vec<CheckpointSummary> {
        let n = self.paths as f64;
        (0..self.times.len())
            .map(|c| {
                let mut mean = vec![0.0; self.dim];
                for p in 0..self.paths {
                    mean.iter_mut().zip(self.state(p, c)).for_each(|(m, x)| *m += x);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut variance = vec![0.0; self.dim];
                for p in 0..self.paths {
                    for ((v, x), m) in variance.iter_mut().zip(self.state(p, c)).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                let denom = (n - 1.0).max(1.0);
                variance.iter_mut().for_each(|v| *v /= denom);
                let standard_error = variance.iter().map(|v| (v / n).sqrt()).collect();
                CheckpointSummary { t: self.times[c], mean, variance, standard_error }
            })
            .collect()
    }

    /// Columns `path_id, t, x_0..x_{d−1}`.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = vec!["path_id".into(), "t".into()];
        header.extend((0..self.dim).map(|j| format!("x_{j}")));
        let mut table = CsvTable::new(header);
        let mut row = Vec::with_capacity(self.dim + 1);
        for p in 0..self.paths {
            for (c, &t) in self.times.iter().enumerate() {
                row.clear();
                row.push(t);
                row.extend_from_slice(self.state(p, c));
                table.push_row(&[p as u64], &row);
            }
        }
        table.render()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "paths": self.paths, "checkpoints": self.summary() })
    }
}

/// Step indices for the requested checkpoint times on a grid of `n` steps.
fn checkpoint_steps(h: f64, n: usize, checkpoints: &[f64]) -> Vec<usize> {
    if checkpoints.is_empty() {
        return vec![n];
    }
    checkpoints.iter().map(|&c| ((c / h).round() as usize).min(n)).collect()
}

/// Integrates `paths` independent Euler–Maruyama paths
/// `x ← x + f·h + σ·√h·z` from `x0` up to `horizon`. Path `p` depends only
/// on `(seed, p)`.
pub fn euler_maruyama<P: DiffusionProcess>(
    process: &P,
    x0: &[f64],
    h: f64,
    horizon: f64,
    paths: usize,
    seed: u64,
    checkpoints: &[f64],
) -> Result<PathEnsemble> {
    let d = process.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(format!("step h must be > 0, got {h}")));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(invalid(format!("horizon must be >= 0, got {horizon}")));
    }
    if paths < 1 {
        return Err(invalid("path count must be >= 1"));
    }
    let n = (horizon / h).round() as usize;
    let marks = checkpoint_steps(h, n, checkpoints);
    let last = marks.iter().copied().max().unwrap_or(0);
    let sqrt_h = h.sqrt();
    let per_path = marks.len() * d;

    struct Work<S> {
        scratch: S,
        x: Vec<f64>,
        f: Vec<f64>,
        z: Vec<f64>,
        noise: Vec<f64>,
        sigma: DMatrix<f64>,
    }

    let results: Vec<Result<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map_init(
            || Work { scratch: process.scratch(), x: vec![0.0; d], f: vec![0.0; d], z: vec![0.0; d], noise: vec![0.0; d], sigma: DMatrix::zeros(d, d) },
            |w, p| {
                let mut out = vec![0.0; per_path];
                w.x.copy_from_slice(x0);
                let record = |out: &mut [f64], x: &[f64], step: usize| {
                    for (c, &m) in marks.iter().enumerate() {
                        if m == step {
                            out[c * d..(c + 1) * d].copy_from_slice(x);
                        }
                    }
                };
                record(&mut out, &w.x, 0);
                for step in 0..last {
                    let t = step as f64 * h;
                    process.coefficients(t, &w.x, p, step, &mut w.scratch, &mut w.f, &mut w.sigma)?;
                    let mut rng = StreamKey::new(seed, Purpose::PathNoise).replicate(p as u64).step(step as u64).rng();
                    for z in w.z.iter_mut() {
                        *z = StandardNormal.sample(&mut rng);
                    }
                    matvec_into(&w.sigma, &w.z, &mut w.noise);
                    for ((x, f), e) in w.x.iter_mut().zip(&w.f).zip(&w.noise) {
                        *x += f * h + e * sqrt_h;
                    }
                    if w.x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NumericalAbort {
                            at: format!("path {p}, t = {}", (step + 1) as f64 * h),
                            detail: "state became non-finite".into(),
                        });
                    }
                    record(&mut out, &w.x, step + 1);
                }
                Ok(out)
            },
        )
        .collect();
    let mut states = Vec::with_capacity(paths * per_path);
    for r in results {
        states.extend(r?);
    }
    Ok(PathEnsemble { dim: d, paths, times: marks.iter().map(|&m| m as f64 * h).collect(), states })
}

/// The FedAvg diffusion: `f = η₀(t)·M̂(x)`, `σ = η₀(t)·√h·V̂^{1/2}(x)`, with
/// both moments re-estimated from fresh rollouts at every call.
pub struct FedAvgDiffusion<'a> {
    pub problem: &'a Problem,
    pub config: &'a FedAvgConfig,
    pub inner_replicates: usize,
    pub seed: u64,
}

pub struct FedAvgScratch {
    rollout: Rollout,
    total: Vec<f64>,
    acc: MomentAccumulator,
}

impl DiffusionProcess for FedAvgDiffusion<'_> {
    type Scratch = FedAvgScratch;

    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn scratch(&self) -> FedAvgScratch {
        let d = self.problem.dim();
        FedAvgScratch { rollout: Rollout::new(d), total: vec![0.0; d], acc: MomentAccumulator::new(d) }
    }

    fn coefficients(
        &self,
        t: f64,
        x: &[f64],
        path: usize,
        step: usize,
        s: &mut FedAvgScratch,
        drift: &mut [f64],
        diffusion: &mut DMatrix<f64>,
    ) -> Result<()> {
        let cfg = self.config;
        let inner_seed = StreamKey::new(self.seed, Purpose::MomentRollout).round(step as u64).replicate(path as u64).hash();
        let base = StreamKey::new(inner_seed, Purpose::ServerUpdate);
        s.acc.reset();
        let rate = cfg.client_schedule.value(t);
        accumulate_draws(self.problem, x, rate, cfg.local_steps, cfg.clip_norm, base, 0..self.inner_replicates, &mut s.rollout, &mut s.total, &mut s.acc);
        let eta0 = cfg.server_schedule.value(t);
        for (f, m) in drift.iter_mut().zip(s.acc.mean()) {
            *f = eta0 * m;
        }
        let root = psd_sqrt(&s.acc.covariance())?.root;
        let scale = eta0 * cfg.lift.sqrt();
        diffusion.iter_mut().zip(root.iter()).for_each(|(o, r)| *o = scale * r);
        Ok(())
    }
}

/// Path ensemble of the FedAvg diffusion with step `h = fedavg.lift`.
pub fn integrate(problem: &Problem, config: &IntegratorConfig, fedavg: &FedAvgConfig, w_init: &WeightVector) -> Result<PathEnsemble> {
    fedavg.validate()?;
    let diag = config.diagnostics(fedavg.lift);
    if !diag.is_empty() {
        return Err(Error::Config(diag));
    }
    let process = FedAvgDiffusion { problem, config: fedavg, inner_replicates: config.inner_replicates, seed: config.seed };
    euler_maruyama(&process, w_init.as_slice(), fedavg.lift, config.horizon, config.paths, config.seed, &config.checkpoints)
}

#[cfg(test)]
mod tests {
    fn dvec(x: &[f64]) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_column_slice(x)
    }

    use super::*;
    use crate::discrete::sample_a;
    use crate::model::{Client, ClientLoss};
    use crate::schedule::Schedule;

    fn scalar_problem(clients: &[(f64, f64, f64, f64)]) -> Problem {
        Problem::new(
            clients
                .iter()
                .map(|&(p, u, a, s)| Client::new(p, ClientLoss::quadratic_1d(u, a).unwrap(), DMatrix::from_element(1, 1, s)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn fed(e: usize, h: f64, rate: f64, server: f64) -> FedAvgConfig {
        FedAvgConfig {
            local_steps: e,
            lift: h,
            client_schedule: Schedule::constant(rate).unwrap(),
            server_schedule: Schedule::constant(server).unwrap(),
            rounds: 1,
            seed: 9,
            clip_norm: None,
        }
    }

    fn wv(x: &[f64]) -> WeightVector {
        WeightVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-14);
        let r = matrix_sqrt_psd(&DMatrix::from_diagonal(&dvec(&[4.0, 9.0]))).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14 && (r[(1, 1)] - 3.0).abs() < 1e-14);
        assert!(r[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn sqrt_rejects_negative_definite() {
        let m = DMatrix::from_diagonal(&dvec(&[1.0, -1e-6]));
        assert!(matches!(matrix_sqrt_psd(&m), Err(Error::NotPsd(_))));
        let m = DMatrix::from_diagonal(&dvec(&[1.0, -1e-12]));
        assert!(matrix_sqrt_psd(&m).is_ok());
    }

    #[test]
    fn accumulator_matches_two_pass() {
        let xs: Vec<[f64; 2]> = (0..37).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos() + 0.1 * i as f64]).collect();
        let mut acc = MomentAccumulator::new(2);
        let mut left = MomentAccumulator::new(2);
        let mut right = MomentAccumulator::new(2);
        for (i, x) in xs.iter().enumerate() {
            acc.push(x);
            if i < 11 { left.push(x) } else { right.push(x) }
        }
        left.merge(&right);
        let n = xs.len() as f64;
        let m: Vec<f64> = (0..2).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        for a in [&acc, &left] {
            let c = a.covariance();
            for i in 0..2 {
                assert!((a.mean()[i] - m[i]).abs() < 1e-14);
                for j in 0..2 {
                    let oracle = xs.iter().map(|x| (x[i] - m[i]) * (x[j] - m[j])).sum::<f64>() / (n - 1.0);
                    assert!((c[(i, j)] - oracle).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn noiseless_moments() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.0)]);
        let est = estimate_moments(&wv(&[1.0]), &p, &fed(1, 0.1, 0.1, 1.0), 0.0, 8).unwrap();
        assert!((est.mean[0] + 0.1).abs() < 1e-15);
        assert_eq!(est.covariance[(0, 0)], 0.0);
        assert_eq!(est.replicates, 8);
    }

    #[test]
    fn rejects_single_replicate() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.0)]);
        assert!(estimate_moments(&wv(&[1.0]), &p, &fed(1, 0.1, 0.1, 1.0), 0.0, 1).is_err());
    }

    #[test]
    fn single_step_variance_is_eta_squared_sigma() {
        let (eta, s2) = (0.1, 0.5);
        let p = scalar_problem(&[(1.0, 1.0, 0.0, s2)]);
        let n = 40_000;
        let est = estimate_moments(&wv(&[1.0]), &p, &fed(1, 0.1, eta, 1.0), 0.0, n).unwrap();
        let target = eta * eta * s2;
        // SE of a Gaussian sample variance is σ²·√(2/(n−1))
        let se = target * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((est.covariance[(0, 0)] - target).abs() < 3.0 * se);
        assert!((est.mean[0] + 0.1).abs() < 3.0 * est.standard_errors[0]);
    }

    #[test]
    fn moments_agree_with_sample_a() {
        let p = scalar_problem(&[(0.3, 1.0, 0.0, 0.4), (0.7, 2.0, 1.0, 0.2)]);
        let cfg = fed(3, 0.1, 0.05, 1.0);
        let draws = sample_a(&wv(&[0.5]), &p, &cfg, 0.3, 1500).unwrap();
        let est = estimate_moments(&wv(&[0.5]), &p, &cfg, 0.3, 1500).unwrap();
        let n = draws.len() as f64;
        let m = draws.iter().map(|d| d.value[0]).sum::<f64>() / n;
        let v = draws.iter().map(|d| (d.value[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((est.mean[0] - m).abs() < 1e-14);
        assert!((est.covariance[(0, 0)] - v).abs() < 1e-14);
    }

    fn integ(horizon: f64, paths: usize, inner: usize) -> IntegratorConfig {
        IntegratorConfig { horizon, inner_replicates: inner, paths, seed: 4, checkpoints: vec![] }
    }

    #[test]
    fn noiseless_ensemble_collapses() {
        let p = scalar_problem(&[(0.5, 1.0, 0.0, 0.0), (0.5, 3.0, 4.0, 0.0)]);
        let cfg = fed(2, 0.1, 0.1, 1.0);
        let ens = integrate(&p, &integ(1.0, 5, 2), &cfg, &wv(&[0.0])).unwrap();
        let first = ens.state(0, 0)[0];
        for q in 1..5 {
            assert_eq!(ens.state(q, 0)[0], first);
        }
        let s = ens.summary();
        assert!(s[0].variance[0] < 1e-30);
        assert!((s[0].t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn euler_is_first_order_on_the_drift_ode() {
        // E = 1, Σ = 0: M̂ = −η·U·(w − a), so w(t) = a + (w₀ − a)·exp(−η₀·η·U·t)
        let (u, a, eta, eta0) = (2.0, 1.0, 0.5, 1.0);
        let p = scalar_problem(&[(1.0, u, a, 0.0)]);
        let exact = a + (0.0 - a) * (-eta0 * eta * u * 2.0_f64).exp();
        let err = |h: f64| {
            let cfg = fed(1, h, eta, eta0);
            let ens = integrate(&p, &integ(2.0, 1, 2), &cfg, &wv(&[0.0])).unwrap();
            (ens.state(0, 0)[0] - exact).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn one_step_matches_discrete_round_moments() {
        let p = scalar_problem(&[(0.4, 1.0, 0.0, 0.3), (0.6, 2.0, 1.0, 0.5)]);
        let cfg = fed(2, 0.5, 0.1, 2.0);
        let w0 = wv(&[0.7]);
        // discrete update w0 + h·η₀·A at t = 0
        let est = estimate_moments(&w0, &p, &cfg, 0.0, 100_000).unwrap();
        let step = cfg.lift * 2.0;
        let (m_disc, v_disc) = (0.7 + step * est.mean[0], step * step * est.covariance[(0, 0)]);
        let ens = integrate(&p, &IntegratorConfig { horizon: 0.5, inner_replicates: 400, paths: 4000, seed: 1, checkpoints: vec![] }, &cfg, &w0).unwrap();
        let s = &ens.summary()[0];
        assert!((s.mean[0] - m_disc).abs() < 4.0 * s.standard_error[0], "{} vs {m_disc}", s.mean[0]);
        let v_se = v_disc * (2.0 / 3999.0_f64).sqrt();
        assert!((s.variance[0] - v_disc).abs() < 4.0 * v_se, "{} vs {v_disc}", s.variance[0]);
    }

    #[test]
    fn unit_lift_matches_discrete_mean_over_many_rounds() {
        // h·η₀ = 1 and E = 1: each EM step is a round in distribution, so the
        // mean is a + (w₀ − a)(1 − ηU)ⁿ
        let (u, a, eta) = (1.0, 2.0, 0.1);
        let p = scalar_problem(&[(1.0, u, a, 0.2)]);
        let cfg = fed(1, 0.5, eta, 2.0);
        let ens = integrate(&p, &IntegratorConfig { horizon: 5.0, inner_replicates: 200, paths: 2000, seed: 2, checkpoints: vec![2.5, 5.0] }, &cfg, &wv(&[0.0])).unwrap();
        for (c, n) in [(0, 5), (1, 10)] {
            let s = &ens.summary()[c];
            let oracle = a + (0.0 - a) * (1.0 - eta * u).powi(n);
            assert!((s.mean[0] - oracle).abs() < 4.0 * s.standard_error[0] + 1e-3, "n={n}: {} vs {oracle}", s.mean[0]);
        }
    }

    #[test]
    fn ensemble_is_deterministic() {
        let p = scalar_problem(&[(0.4, 1.0, 0.0, 0.3), (0.6, 2.0, 1.0, 0.5)]);
        let cfg = fed(2, 0.1, 0.1, 1.0);
        let ic = IntegratorConfig { horizon: 0.5, inner_replicates: 10, paths: 7, seed: 3, checkpoints: vec![0.0, 0.2, 0.5] };
        let a = integrate(&p, &ic, &cfg, &wv(&[1.0])).unwrap();
        let b = integrate(&p, &ic, &cfg, &wv(&[1.0])).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.state(3, 0)[0], 1.0);
        assert_eq!(a.to_csv().lines().count(), 1 + 7 * 3);
    }

    #[test]
    fn bad_integrator_config_lists_all_problems() {
        let ic = IntegratorConfig { horizon: 0.01, inner_replicates: 1, paths: 0, seed: 0, checkpoints: vec![5.0] };
        assert_eq!(ic.diagnostics(0.1).len(), 4);
    }
}
