//! The discrete FedAvg process under the Gaussian gradient-noise model.
//!
//! A round starting from server weights `w₀` at continuous time `t = T·h`
//! broadcasts `w₀`, lets every client take `E` noisy SGD steps with rate
//! `η(t)`, and moves the server by `h·η₀(t)·A` where
//! `A = Σ_k p_k (w^k_E − w₀)` is the aggregated client displacement.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::format::CsvTable;
use crate::linalg::matvec_into;
use crate::model::{Problem, WeightVector};
use crate::rng::{time_key, Purpose, StreamKey};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    /// `E`, local SGD steps per round.
    pub local_steps: usize,
    /// `h`, the lift constant: round `T` happens at time `T·h`.
    pub lift: f64,
    /// `η(t)`, shared by every client.
    pub client_schedule: Schedule,
    /// `η₀(t)`; the server step is `h·η₀(t)`.
    pub server_schedule: Schedule,
    pub rounds: usize,
    pub seed: u64,
    /// Optional max-norm clip applied to each stochastic gradient.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        self.diagnostics().into_iter().next().map_or(Ok(()), |m| Err(invalid(m)))
    }

    /// Every violated constraint, not just the first.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.local_steps < 1 {
            out.push("E must be >= 1 (local_steps)".to_string());
        }
        if !(self.lift.is_finite() && self.lift > 0.0) {
            out.push(format!("h must be > 0 (lift = {})", self.lift));
        }
        if let Err(e) = self.client_schedule.validate() {
            out.push(format!("client_schedule: {e}"));
        }
        if let Err(e) = self.server_schedule.validate() {
            out.push(format!("server_schedule: {e}"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                out.push(format!("clip_norm must be > 0, got {c}"));
            }
        }
        out
    }

    pub fn time_of_round(&self, round: usize) -> f64 {
        round as f64 * self.lift
    }
}

/// One realization of the aggregated server update `A` at a fixed server
/// state, with its per-client decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerUpdateDraw {
    /// `A = Σ_k client_terms[k]`.
    pub value: WeightVector,
    /// `p_k·Σᵢ η(Nᵢ − Gᵢ)` for each client.
    pub client_terms: Vec<WeightVector>,
    /// `Σᵢ Nᵢ`, the summed gradient-noise draws of each client (unscaled).
    pub noise_sums: Vec<WeightVector>,
}

/// Reusable buffers for client rollouts.
#[derive(Debug, Clone)]
pub(crate) struct Rollout {
    w: Vec<f64>,
    grad: Vec<f64>,
    z: Vec<f64>,
    xi: Vec<f64>,
    noise_sum: Vec<f64>,
    term: Vec<f64>,
}

impl Rollout {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            w: vec![0.0; dim],
            grad: vec![0.0; dim],
            z: vec![0.0; dim],
            xi: vec![0.0; dim],
            noise_sum: vec![0.0; dim],
            term: vec![0.0; dim],
        }
    }

    /// Draws `ξ ~ N(0, Σ_k)` for the stream `key` into `self.xi`.
    fn draw_noise(&mut self, problem: &Problem, k: usize, key: StreamKey) {
        let mut rng = key.rng();
        for z in self.z.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
        matvec_into(problem.clients()[k].noise_root(), &self.z, &mut self.xi);
    }

    /// Runs `steps` local steps of client `k` from `w0`. Leaves the final
    /// iterate in `self.w`, `Σ N` in `self.noise_sum`, and, when given, the
    /// drift `‖w₀ − w^k(i)‖` after step `i` in `drift[i−1]`.
    pub(crate) fn client(
        &mut self,
        problem: &Problem,
        k: usize,
        w0: &[f64],
        rate: f64,
        steps: usize,
        clip: Option<f64>,
        key: StreamKey,
        mut drift: Option<&mut [f64]>,
    ) {
        let loss = problem.clients()[k].loss();
        self.w.copy_from_slice(w0);
        self.noise_sum.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..steps {
            self.draw_noise(problem, k, key.step(i as u64));
            loss.gradient_into(&self.w, &mut self.grad);
            // stochastic gradient G + ξ; the paper's N is −ξ
            for ((g, x), n) in self.grad.iter_mut().zip(&self.xi).zip(self.noise_sum.iter_mut()) {
                *g += x;
                *n -= x;
            }
            if let Some(c) = clip {
                let norm = self.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    self.grad.iter_mut().for_each(|v| *v *= s);
                }
            }
            for (w, g) in self.w.iter_mut().zip(&self.grad) {
                *w -= rate * g;
            }
            if let Some(d) = drift.as_deref_mut() {
                d[i] = self.w.iter().zip(w0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            }
        }
    }

    /// One draw of `A` at `w0`; `sink(k, term_k, noise_sum_k)` sees every
    /// client's contribution, and the sum lands in `total`.
    pub(crate) fn server_update(
        &mut self,
        problem: &Problem,
        w0: &[f64],
        rate: f64,
        steps: usize,
        clip: Option<f64>,
        key: StreamKey,
        total: &mut [f64],
        mut drift: Option<&mut [Vec<f64>]>,
        mut sink: impl FnMut(usize, &[f64], &[f64]),
    ) {
        total.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..problem.num_clients() {
            let d = drift.as_deref_mut().map(|d| d[k].as_mut_slice());
            self.client(problem, k, w0, rate, steps, clip, key.client(k as u64), d);
            let p = problem.clients()[k].weight();
            for ((t, w), x0) in self.term.iter_mut().zip(&self.w).zip(w0) {
                *t = p * (w - x0);
            }
            for (s, t) in total.iter_mut().zip(&self.term) {
                *s += t;
            }
            sink(k, &self.term, &self.noise_sum);
        }
    }
}

/// `w − η(∇F^k(w) + ξ)` for a given noise draw `ξ ~ N(0, Σ_k)`.
pub fn local_sgd_step(w: &WeightVector, problem: &Problem, k: usize, rate: f64, noise: &DVector<f64>) -> Result<WeightVector> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(invalid(format!("learning rate must be >= 0, got {rate}")));
    }
    if noise.len() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: noise.len() });
    }
    let g = problem.client_gradient(k, w)?;
    WeightVector::from_vector(w.as_vector() - (g.as_vector() + noise) * rate)
        .map_err(|_| Error::NonFinite(format!("local step of client {k}")))
}

/// The noise draw `ξ ~ N(0, Σ_k)` a rollout uses for stream `key`.
pub fn client_noise(problem: &Problem, k: usize, key: StreamKey) -> Result<DVector<f64>> {
    problem.client(k)?;
    let mut r = Rollout::new(problem.dim());
    r.draw_noise(problem, k, key);
    Ok(DVector::from_column_slice(&r.xi))
}

/// Result of one aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub server: WeightVector,
    pub update: ServerUpdateDraw,
    /// `drift[k][i−1] = ‖w₀ − w^k(i)‖` after local step `i`.
    pub drift: Vec<Vec<f64>>,
}

fn collect_draw(problem: &Problem, rollout: &mut Rollout, w0: &[f64], rate: f64, steps: usize, clip: Option<f64>, key: StreamKey, drift: Option<&mut [Vec<f64>]>) -> ServerUpdateDraw {
    let q = problem.num_clients();
    let mut terms = Vec::with_capacity(q);
    let mut noises = Vec::with_capacity(q);
    let mut total = vec![0.0; problem.dim()];
    rollout.server_update(problem, w0, rate, steps, clip, key, &mut total, drift, |_, t, n| {
        terms.push(WeightVector::from_slice_unchecked(t));
        noises.push(WeightVector::from_slice_unchecked(n));
    });
    ServerUpdateDraw { value: WeightVector::from_slice_unchecked(&total), client_terms: terms, noise_sums: noises }
}

/// One round with explicit rates: clients step with `client_rate`, the server
/// applies `w₀ + server_step·A`.
pub fn apply_round(
    w0: &WeightVector,
    problem: &Problem,
    local_steps: usize,
    client_rate: f64,
    server_step: f64,
    clip: Option<f64>,
    key: StreamKey,
) -> Result<RoundOutcome> {
    if w0.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: w0.dim() });
    }
    let mut rollout = Rollout::new(problem.dim());
    let mut drift = vec![vec![0.0; local_steps]; problem.num_clients()];
    let update = collect_draw(problem, &mut rollout, w0.as_slice(), client_rate, local_steps, clip, key, Some(&mut drift));
    let next = w0.as_vector() + update.value.as_vector() * server_step;
    let server = WeightVector::from_vector(next).map_err(|_| Error::NumericalAbort {
        at: format!("round {}", key.round),
        detail: "server weights became non-finite".into(),
    })?;
    Ok(RoundOutcome { server, update, drift })
}

/// Round `round_index` of the schedule in `config`, starting from `w0`.
pub fn run_round(w0: &WeightVector, problem: &Problem, config: &FedAvgConfig, round_index: usize) -> Result<RoundOutcome> {
    config.validate()?;
    let t = config.time_of_round(round_index);
    let key = StreamKey::new(config.seed, Purpose::Trajectory).round(round_index as u64);
    apply_round(
        w0,
        problem,
        config.local_steps,
        config.client_schedule.value(t),
        config.lift * config.server_schedule.value(t),
        config.clip_norm,
        key,
    )
}

/// State of the server after `round` aggregations.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub time: f64,
    pub server: WeightVector,
    pub loss: f64,
    pub grad_norm_sq: f64,
    /// Client drift of the round that produced this state; empty for the
    /// initial record.
    pub drift: Vec<Vec<f64>>,
}


/// Lazily generated FedAvg trajectory: the initial record, then one record
/// per round. Stops after the first error.
pub struct FedAvgRun<'a> {
    problem: &'a Problem,
    config: &'a FedAvgConfig,
    state: WeightVector,
    emitted: usize,
    rollout: Rollout,
    total: Vec<f64>,
    failed: bool,
}

impl<'a> FedAvgRun<'a> {
    pub fn new(problem: &'a Problem, config: &'a FedAvgConfig, w_init: &WeightVector) -> Result<Self> {
        config.validate()?;
        if w_init.dim() != problem.dim() {
            return Err(Error::DimensionMismatch { expected: problem.dim(), got: w_init.dim() });
        }
        Ok(Self {
            problem,
            config,
            state: w_init.clone(),
            emitted: 0,
            rollout: Rollout::new(problem.dim()),
            total: vec![0.0; problem.dim()],
            failed: false,
        })
    }

    fn record(&self, round: usize, drift: Vec<Vec<f64>>) -> Result<RoundRecord> {
        let w = self.state.as_slice();
        let loss = self.problem.loss(w);
        let grad_norm_sq = self.problem.gradient_norm_sq(w);
        if !loss.is_finite() || !grad_norm_sq.is_finite() {
            return Err(Error::NumericalAbort { at: format!("round {round}"), detail: "loss became non-finite".into() });
        }
        Ok(RoundRecord { round, time: self.config.time_of_round(round), server: self.state.clone(), loss, grad_norm_sq, drift })
    }

    /// Executes round `round` (0-based) and returns the record of the state
    /// it produces, `round + 1`.
    fn advance(&mut self, round: usize) -> Result<RoundRecord> {
        let cfg = self.config;
        let t = cfg.time_of_round(round);
        let key = StreamKey::new(cfg.seed, Purpose::Trajectory).round(round as u64);
        let mut drift = vec![vec![0.0; cfg.local_steps]; self.problem.num_clients()];
        self.rollout.server_update(
            self.problem,
            self.state.as_slice(),
            cfg.client_schedule.value(t),
            cfg.local_steps,
            cfg.clip_norm,
            key,
            &mut self.total,
            Some(&mut drift),
            |_, _, _| {},
        );
        let step = cfg.lift * cfg.server_schedule.value(t);
        let next: Vec<f64> = self.state.iter().zip(&self.total).map(|(w, a)| w + step * a).collect();
        self.state = WeightVector::new(next).map_err(|_| Error::NumericalAbort {
            at: format!("round {}", round + 1),
            detail: "server weights became non-finite".into(),
        })?;
        self.record(round + 1, drift)
    }
}

impl Iterator for FedAvgRun<'_> {
    type Item = Result<RoundRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.emitted > self.config.rounds {
            return None;
        }
        let out = match self.emitted {
            0 => self.record(0, Vec::new()),
            n => self.advance(n - 1),
        };
        self.emitted += 1;
        self.failed = out.is_err();
        Some(out)
    }
}

/// Every record of a run, `rounds + 1` in total.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
    pub clients: usize,
    pub local_steps: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> &WeightVector {
        &self.records.last().expect("trajectory always holds the initial record").server
    }

    /// Columns: `round, t, w0_0..w0_{d−1}, loss, grad_norm_sq`, then
    /// `drift_client_k_step_i` for every client `k` and local step `i ≥ 1`.
    /// The initial record has no client work and carries `NaN` drift.
    pub fn to_csv(&self) -> String {
        let dim = self.records[0].server.dim();
        let mut header: Vec<String> = vec!["round".into(), "t".into()];
        header.extend((0..dim).map(|j| format!("w0_{j}")));
        header.push("loss".into());
        header.push("grad_norm_sq".into());
        for k in 0..self.clients {
            for i in 1..=self.local_steps {
                header.push(format!("drift_client_{k}_step_{i}"));
            }
        }
        let mut table = CsvTable::new(header);
        let mut row = Vec::with_capacity(table.columns());
        for r in &self.records {
            row.clear();
            row.push(r.time);
            row.extend(r.server.iter().copied());
            row.push(r.loss);
            row.push(r.grad_norm_sq);
            if r.drift.is_empty() {
                row.extend(std::iter::repeat_n(f64::NAN, self.clients * self.local_steps));
            } else {
                for d in &r.drift {
                    row.extend(d.iter().copied());
                }
            }
            table.push_row(&[r.round as u64], &row);
        }
        table.render()
    }
}

/// Runs the full schedule; deterministic given `config.seed`.
pub fn run_fedavg(problem: &Problem, config: &FedAvgConfig, w_init: &WeightVector) -> Result<Trajectory> {
    let records = FedAvgRun::new(problem, config, w_init)?.collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { records, clients: problem.num_clients(), local_steps: config.local_steps })
}

/// `replicates` independent draws of `A` at the fixed server state `w0` and
/// time `t`. Replicate `r` depends only on `(seed, t, r)`, so the result is
/// independent of thread count and scheduling.
pub fn sample_a(w0: &WeightVector, problem: &Problem, config: &FedAvgConfig, t: f64, replicates: usize) -> Result<Vec<ServerUpdateDraw>> {
    config.validate()?;
    if replicates < 1 {
        return Err(invalid("replicate count must be >= 1"));
    }
    if w0.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: w0.dim() });
    }
    let rate = config.client_schedule.value(t);
    let base = StreamKey::new(config.seed, Purpose::ServerUpdate).round(time_key(t));
    let draws = (0..replicates)
        .into_par_iter()
        .map_init(
            || Rollout::new(problem.dim()),
            |rollout, r| collect_draw(problem, rollout, w0.as_slice(), rate, config.local_steps, config.clip_norm, base.replicate(r as u64), None),
        )
        .collect();
    Ok(draws)
}

/// Monte Carlo mean of `‖w₀ − w^k(i)‖` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftEstimate {
    pub step: usize,
    pub mean: f64,
    pub standard_error: f64,
}

/// Estimates the expected drift of client `k` after each local step
/// `i = 1..=steps` from `replicates` independent rollouts at `w0`.
pub fn measure_client_drift(
    problem: &Problem,
    k: usize,
    w0: &WeightVector,
    rate: f64,
    steps: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<DriftEstimate>> {
    problem.client(k)?;
    if replicates < 2 {
        return Err(invalid("drift estimate needs at least 2 replicates"));
    }
    if w0.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: w0.dim() });
    }
    let base = StreamKey::new(seed, Purpose::ServerUpdate).client(k as u64);
    let (sum, sum_sq) = (0..replicates)
        .into_par_iter()
        .map_init(
            || (Rollout::new(problem.dim()), vec![0.0; steps]),
            |(rollout, drift), r| {
                rollout.client(problem, k, w0.as_slice(), rate, steps, None, base.replicate(r as u64), Some(drift));
                (drift.clone(), drift.iter().map(|d| d * d).collect::<Vec<_>>())
            },
        )
        .reduce(
            || (vec![0.0; steps], vec![0.0; steps]),
            |(mut a, mut b), (c, d)| {
                a.iter_mut().zip(c).for_each(|(x, y)| *x += y);
                b.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                (a, b)
            },
        );
    let n = replicates as f64;
    Ok((0..steps)
        .map(|i| {
            let mean = sum[i] / n;
            let var = ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
            DriftEstimate { step: i + 1, mean, standard_error: (var / n).sqrt() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Client, ClientLoss};
    use nalgebra::DMatrix;

    fn scalar_problem(clients: &[(f64, f64, f64, f64)]) -> Problem {
        Problem::new(
            clients
                .iter()
                .map(|&(p, u, a, s)| Client::new(p, ClientLoss::quadratic_1d(u, a).unwrap(), DMatrix::from_element(1, 1, s)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn config(e: usize, h: f64, rate: f64, server: f64, rounds: usize) -> FedAvgConfig {
        FedAvgConfig {
            local_steps: e,
            lift: h,
            client_schedule: Schedule::constant(rate).unwrap(),
            server_schedule: Schedule::constant(server).unwrap(),
            rounds,
            seed: 11,
            clip_norm: None,
        }
    }

    fn wv(x: &[f64]) -> WeightVector {
        WeightVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn exact_local_step() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.0)]);
        let w = local_sgd_step(&wv(&[1.0]), &p, 0, 0.1, &DVector::zeros(1)).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_weights() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 1.0)]);
        let w = local_sgd_step(&wv(&[1.0]), &p, 0, 0.0, &DVector::from_element(1, 0.3)).unwrap();
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn step_at_minimizer_without_noise_is_fixed() {
        let p = scalar_problem(&[(1.0, 2.0, 1.5, 0.0)]);
        let w = local_sgd_step(&wv(&[1.5]), &p, 0, 0.3, &DVector::zeros(1)).unwrap();
        assert_eq!(w[0], 1.5);
    }

    #[test]
    fn one_step_one_client_round_is_gradient_descent() {
        let p = scalar_problem(&[(0.5, 1.0, 0.0, 0.0), (0.5, 3.0, 4.0, 0.0)]);
        let cfg = config(1, 1.0, 0.1, 1.0, 1);
        let out = run_round(&wv(&[1.0]), &p, &cfg, 0).unwrap();
        // 1 − 0.1·(0.5·1 + 0.5·3·(1−4)) = 1 − 0.1·(−4) = 1.4
        assert!((out.server[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn zero_server_step_freezes_weights() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.5)]);
        let key = StreamKey::new(3, Purpose::Trajectory);
        let out = apply_round(&wv(&[2.0]), &p, 3, 0.1, 0.0, None, key).unwrap();
        assert_eq!(out.server[0], 2.0);
        assert!(out.update.value[0] != 0.0);
    }

    #[test]
    fn identical_deterministic_clients_match_single_client() {
        let many = scalar_problem(&[(0.25, 2.0, 1.0, 0.0); 4]);
        let one = scalar_problem(&[(1.0, 2.0, 1.0, 0.0)]);
        let cfg = config(3, 0.5, 0.05, 2.0, 1);
        let a = run_round(&wv(&[-1.0]), &many, &cfg, 0).unwrap();
        let b = run_round(&wv(&[-1.0]), &one, &cfg, 0).unwrap();
        assert!((a.server[0] - b.server[0]).abs() < 1e-15);
    }

    #[test]
    fn update_value_is_sum_of_client_terms() {
        let p = scalar_problem(&[(0.2, 1.0, 0.0, 0.3), (0.3, 2.0, 1.0, 0.1), (0.5, 0.5, -1.0, 0.7)]);
        let cfg = config(4, 0.1, 0.1, 1.0, 1);
        for d in sample_a(&wv(&[0.4]), &p, &cfg, 0.0, 20).unwrap() {
            let s: f64 = d.client_terms.iter().map(|t| t[0]).sum();
            assert_eq!(s, d.value[0]);
        }
    }

    #[test]
    fn noiseless_draws_are_identical() {
        let p = scalar_problem(&[(0.5, 1.0, 0.0, 0.0), (0.5, 3.0, 4.0, 0.0)]);
        let cfg = config(3, 0.1, 0.05, 1.0, 1);
        let draws = sample_a(&wv(&[1.0]), &p, &cfg, 0.0, 10).unwrap();
        assert!(draws.iter().all(|d| d.value == draws[0].value));
    }

    #[test]
    fn single_exact_draw() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.0)]);
        let cfg = config(1, 0.1, 0.1, 1.0, 1);
        for d in sample_a(&wv(&[1.0]), &p, &cfg, 0.0, 5).unwrap() {
            assert!((d.value[0] + 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregated_noise_round_matches_manual_sgd_step() {
        // h·η₀ = 1, E = 1: one round is one SGD step on F with noise Σ p_k ξ_k
        let p = scalar_problem(&[(0.3, 1.0, 0.0, 0.4), (0.7, 2.0, 1.0, 0.9)]);
        let cfg = config(1, 0.5, 0.2, 2.0, 1);
        let w0 = wv(&[0.8]);
        let round = 5;
        let out = run_round(&w0, &p, &cfg, round).unwrap();
        let key = StreamKey::new(cfg.seed, Purpose::Trajectory).round(round as u64);
        let (_, g) = p.loss_and_gradient(&w0).unwrap();
        let noise: f64 = (0..2).map(|k| p.clients()[k].weight() * client_noise(&p, k, key.client(k as u64).step(0)).unwrap()[0]).sum();
        let expect = 0.8 - 0.2 * (g[0] + noise);
        assert!((out.server[0] - expect).abs() < 1e-14, "{} vs {expect}", out.server[0]);
    }

    #[test]
    fn deterministic_loss_is_monotone() {
        let p = scalar_problem(&[(0.5, 1.0, 0.0, 0.0), (0.5, 3.0, 4.0, 0.0)]);
        let cfg = config(2, 0.1, 0.05, 1.0, 200);
        let traj = run_fedavg(&p, &cfg, &wv(&[-5.0])).unwrap();
        assert_eq!(traj.records.len(), 201);
        for pair in traj.records.windows(2) {
            assert!(pair[1].loss <= pair[0].loss + 1e-15);
        }
    }

    #[test]
    fn zero_rounds_is_initial_record_only() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.1)]);
        let cfg = config(2, 0.1, 0.05, 1.0, 0);
        let traj = run_fedavg(&p, &cfg, &wv(&[1.0])).unwrap();
        assert_eq!(traj.records.len(), 1);
        assert_eq!(traj.records[0].round, 0);
        assert!(traj.records[0].drift.is_empty());
    }

    #[test]
    fn equal_seeds_give_identical_csv() {
        let p = scalar_problem(&[(0.4, 1.0, 0.0, 0.2), (0.6, 2.0, 1.0, 0.3)]);
        let cfg = config(3, 0.1, 0.05, 1.0, 50);
        let a = run_fedavg(&p, &cfg, &wv(&[1.0])).unwrap().to_csv();
        let b = run_fedavg(&p, &cfg, &wv(&[1.0])).unwrap().to_csv();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(a, run_fedavg(&p, &other, &wv(&[1.0])).unwrap().to_csv());
    }

    #[test]
    fn csv_header_and_shape() {
        let p = scalar_problem(&[(0.5, 1.0, 0.0, 0.2), (0.5, 2.0, 1.0, 0.3)]);
        let cfg = config(2, 0.1, 0.05, 1.0, 3);
        let csv = run_fedavg(&p, &cfg, &wv(&[1.0])).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "round,t,w0_0,loss,grad_norm_sq,drift_client_0_step_1,drift_client_0_step_2,drift_client_1_step_1,drift_client_1_step_2"
        );
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn trajectory_is_consistent_with_run_round() {
        let p = scalar_problem(&[(0.4, 1.0, 0.0, 0.2), (0.6, 2.0, 1.0, 0.3)]);
        let cfg = config(3, 0.1, 0.05, 1.0, 4);
        let traj = run_fedavg(&p, &cfg, &wv(&[1.0])).unwrap();
        let mut w = wv(&[1.0]);
        for r in 0..4 {
            let out = run_round(&w, &p, &cfg, r).unwrap();
            assert_eq!(out.drift, traj.records[r + 1].drift);
            w = out.server;
            assert_eq!(w, traj.records[r + 1].server);
        }
    }

    #[test]
    fn sample_a_is_order_independent() {
        let p = scalar_problem(&[(0.4, 1.0, 0.0, 0.2), (0.6, 2.0, 1.0, 0.3)]);
        let cfg = config(2, 0.1, 0.05, 1.0, 1);
        let a = sample_a(&wv(&[1.0]), &p, &cfg, 0.7, 40).unwrap();
        let b = sample_a(&wv(&[1.0]), &p, &cfg, 0.7, 10).unwrap();
        assert_eq!(&a[..10], &b[..]);
    }

    #[test]
    fn clipping_bounds_each_step() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.0)]);
        let mut cfg = config(1, 1.0, 1.0, 1.0, 1);
        cfg.clip_norm = Some(0.5);
        let out = run_round(&wv(&[10.0]), &p, &cfg, 0).unwrap();
        assert!((out.server[0] - 9.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_diagnostics() {
        let mut cfg = config(0, -1.0, 0.1, 1.0, 1);
        cfg.clip_norm = Some(0.0);
        let d = cfg.diagnostics();
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(d[0].contains("E must be >= 1"));
    }

    #[test]
    fn drift_grows_with_steps_and_starts_positive() {
        let p = scalar_problem(&[(1.0, 1.0, 0.0, 0.5)]);
        let est = measure_client_drift(&p, 0, &wv(&[2.0]), 0.1, 3, 2000, 5).unwrap();
        assert_eq!(est.len(), 3);
        assert!(est[0].mean > 0.0);
        assert!(est[2].mean > est[0].mean);
    }
}
