//! Normality diagnostics for the server update and the random-time sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::discrete::{FedAvgConfig, Rollout};
use crate::error::{invalid, Error, Result};
use crate::model::{Problem, WeightVector};
use crate::rng::{time_key, Purpose, StreamKey};
use crate::schedule::Schedule;
use crate::sde::MomentAccumulator;

const BLOCK: usize = 512;

/// Streaming central moments up to order four (Pébay's update and merge).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CentralMoments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl CentralMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let mut c = Self::new();
        xs.iter().for_each(|&x| c.push(x));
        c
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, o: &Self) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let d = o.mean - self.mean;
        let (d2, d3) = (d * d, d * d * d);
        let m4 = self.m4
            + o.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        let m3 = self.m3 + o.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        self.m2 += o.m2 + d2 * na * nb / n;
        self.m3 = m3;
        self.m4 = m4;
        self.mean += d * nb / n;
        self.n += o.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `(1/n)·Σ(x − x̄)²`.
    pub fn biased_variance(&self) -> f64 {
        self.m2 / self.n as f64
    }

    pub fn unbiased_variance(&self) -> f64 {
        self.m2 / (self.n as f64 - 1.0)
    }

    /// `(1/n)·Σ(x − x̄)⁴`.
    pub fn fourth_moment(&self) -> f64 {
        self.m4 / self.n as f64
    }

    /// `g₁ = m₃/m₂^{3/2}`.
    pub fn skewness(&self) -> f64 {
        let n = self.n as f64;
        (self.m3 / n) / (self.m2 / n).powf(1.5)
    }

    /// `g₂ = m₄/m₂² − 3`.
    pub fn excess_kurtosis(&self) -> f64 {
        let n = self.n as f64;
        (self.m4 / n) / (self.m2 / n).powi(2) - 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSummary {
    pub mean: f64,
    /// Unbiased.
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn moment_summary(samples: &[f64]) -> Result<MomentSummary> {
    if samples.len() < 4 {
        return Err(invalid(format!("moment summary needs >= 4 samples, got {}", samples.len())));
    }
    let c = CentralMoments::from_samples(samples);
    if !(c.biased_variance() > 0.0) {
        return Err(Error::DegenerateSample("sample variance is zero".into()));
    }
    Ok(MomentSummary { mean: c.mean(), variance: c.unbiased_variance(), skewness: c.skewness(), excess_kurtosis: c.excess_kurtosis() })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `samples` and
/// `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0_f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}

/// KS distance to the normal with the sample's mean and variance.
pub fn ks_normality(samples: &[f64]) -> Result<f64> {
    if samples.len() < 100 {
        return Err(invalid(format!("KS normality test needs >= 100 samples, got {}", samples.len())));
    }
    let c = CentralMoments::from_samples(samples);
    let sd = c.unbiased_variance().sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample("sample variance is zero".into()));
    }
    let m = c.mean();
    Ok(ks_distance(samples, |x| normal_cdf((x - m) / sd)))
}

/// Mean KS distance of `ensembles` truly Gaussian samples of size `n`, the
/// finite-sample floor against which an observed distance is judged.
pub fn calibration_ks(n: usize, ensembles: usize, seed: u64) -> Result<f64> {
    if ensembles < 1 {
        return Err(invalid("need at least one calibration ensemble"));
    }
    let ds = (0..ensembles)
        .into_par_iter()
        .map(|e| {
            let mut rng = StreamKey::new(seed, Purpose::Calibration).replicate(e as u64).rng();
            let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            ks_normality(&xs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ds.iter().sum::<f64>() / ensembles as f64)
}

/// `Σ_k m₄,k / (Σ_k σ²_k)²` from per-client central moments.
pub fn lyapunov_from_moments(clients: &[CentralMoments]) -> Result<f64> {
    let var: f64 = clients.iter().map(CentralMoments::biased_variance).sum();
    if !(var > 0.0) {
        return Err(Error::DegenerateSample("total client variance is zero; Lyapunov ratio undefined".into()));
    }
    Ok(clients.iter().map(CentralMoments::fourth_moment).sum::<f64>() / (var * var))
}

/// Lyapunov ratio (δ = 2) of the per-client terms of `draws` at
/// `coordinate`.
pub fn lyapunov_ratio(draws: &[crate::discrete::ServerUpdateDraw], coordinate: usize) -> Result<f64> {
    if draws.len() < 100 {
        return Err(invalid(format!("Lyapunov ratio needs >= 100 replicates, got {}", draws.len())));
    }
    let q = draws[0].client_terms.len();
    if q < 2 {
        return Err(invalid("Lyapunov ratio needs >= 2 clients"));
    }
    let d = draws[0].value.dim();
    if coordinate >= d {
        return Err(invalid(format!("coordinate {coordinate} out of range for dimension {d}")));
    }
    let mut clients = vec![CentralMoments::new(); q];
    for draw in draws {
        for (c, term) in clients.iter_mut().zip(&draw.client_terms) {
            c.push(term[coordinate]);
        }
    }
    lyapunov_from_moments(&clients)
}

/// Random time point with density `η(s)/φ(t)` on `[0, t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSampler {
    pub schedule: Schedule,
    pub horizon: f64,
    /// `φ(t)`.
    pub normalizer: f64,
}

impl TimeSampler {
    pub fn new(schedule: Schedule, horizon: f64) -> Result<Self> {
        schedule.validate()?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("sampler horizon must be > 0, got {horizon}")));
        }
        Ok(Self { schedule, horizon, normalizer: schedule.integral(horizon) })
    }

    pub fn density(&self, s: f64) -> f64 {
        if (0.0..=self.horizon).contains(&s) {
            self.schedule.value(s) / self.normalizer
        } else {
            0.0
        }
    }

    pub fn cdf(&self, s: f64) -> f64 {
        (self.schedule.integral(s.clamp(0.0, self.horizon)) / self.normalizer).min(1.0)
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.schedule.inverse_integral_fraction(self.horizon, u).clamp(0.0, self.horizon)
    }
}

pub fn sample_time_point<R: Rng + ?Sized>(sampler: &TimeSampler, rng: &mut R) -> f64 {
    sampler.sample(rng)
}

/// Diagnostics of one coordinate of `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordinateNormality {
    pub coordinate: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_distance: f64,
    pub lyapunov_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityReport {
    pub clients: usize,
    pub replicates: usize,
    pub coordinates: Vec<CoordinateNormality>,
    /// Largest Lyapunov ratio over coordinates.
    pub lyapunov_ratio: f64,
    /// Plug-in estimate of the variance-similarity floor `C`:
    /// `min_{k,i} x_k² − (1/2Q)·Σ_j (x_k − x_j)²` with `x_k = Var(A_{k,i})`.
    pub similarity_floor_estimate: f64,
    /// Plug-in estimate of `D = max |E[N^u R^v]|`, `u + v = 4`.
    pub fourth_moment_ceiling_estimate: f64,
    /// `max_{i≠j} |cov_ij| / √(cov_ii·cov_jj)` of the empirical covariance
    /// of `A`; zero in one dimension.
    pub max_offdiagonal_correlation: f64,
}

/// Per-block statistics of the first pass.
struct PassOne {
    total: Vec<CentralMoments>,
    clients: Vec<CentralMoments>,
    /// Mean of `A_k/(p_k·η) − N_k`, the uncentered `R_k` offset.
    offset: Vec<CentralMoments>,
    cov: MomentAccumulator,
}

fn ks_per_coordinate(values: &[f64], d: usize) -> Result<Vec<f64>> {
    (0..d).map(|j| ks_normality(&values.iter().skip(j).step_by(d).copied().collect::<Vec<_>>())).collect()
}

/// Draws `replicates` server updates at `w0` (the same draws as
/// `discrete::sample_a`) and summarizes their normality.
pub fn normality_report(problem: &Problem, config: &FedAvgConfig, w0: &WeightVector, t: f64, replicates: usize) -> Result<NormalityReport> {
    config.validate()?;
    let q = problem.num_clients();
    let d = problem.dim();
    if q < 2 {
        return Err(invalid("normality report needs >= 2 clients"));
    }
    if replicates < 100 {
        return Err(invalid(format!("normality report needs >= 100 replicates, got {replicates}")));
    }
    if w0.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: w0.dim() });
    }
    let rate = config.client_schedule.value(t);
    let base = StreamKey::new(config.seed, Purpose::ServerUpdate).round(time_key(t));
    let weights: Vec<f64> = problem.clients().iter().map(|c| c.weight()).collect();
    let nblocks = replicates.div_ceil(BLOCK);
    let range = |b: usize| b * BLOCK..((b + 1) * BLOCK).min(replicates);

    // first pass: client and total moments, the R offsets, and the samples
    let first: Vec<(PassOne, Vec<f64>)> = (0..nblocks)
        .into_par_iter()
        .map_init(
            || (Rollout::new(d), vec![0.0; d]),
            |(rollout, total), b| {
                let mut s = PassOne {
                    total: vec![CentralMoments::new(); d],
                    clients: vec![CentralMoments::new(); q * d],
                    offset: vec![CentralMoments::new(); q * d],
                    cov: MomentAccumulator::new(d),
                };
                let mut values = Vec::with_capacity(BLOCK * d);
                for r in range(b) {
                    rollout.server_update(problem, w0.as_slice(), rate, config.local_steps, config.clip_norm, base.replicate(r as u64), total, None, |k, term, noise| {
                        let scale = weights[k] * rate;
                        for j in 0..d {
                            s.clients[k * d + j].push(term[j]);
                            if scale > 0.0 {
                                s.offset[k * d + j].push(term[j] / scale - noise[j]);
                            }
                        }
                    });
                    for j in 0..d {
                        s.total[j].push(total[j]);
                    }
                    s.cov.push(total);
                    values.extend_from_slice(total);
                }
                (s, values)
            },
        )
        .collect();
    let mut acc = PassOne {
        total: vec![CentralMoments::new(); d],
        clients: vec![CentralMoments::new(); q * d],
        offset: vec![CentralMoments::new(); q * d],
        cov: MomentAccumulator::new(d),
    };
    let mut values = Vec::with_capacity(replicates * d);
    for (s, v) in &first {
        for (a, b) in acc.total.iter_mut().zip(&s.total) {
            a.merge(b);
        }
        for (a, b) in acc.clients.iter_mut().zip(&s.clients) {
            a.merge(b);
        }
        for (a, b) in acc.offset.iter_mut().zip(&s.offset) {
            a.merge(b);
        }
        acc.cov.merge(&s.cov);
        values.extend_from_slice(v);
    }
    drop(first);

    // second pass regenerates the same draws for E[N^u R^v]
    let offsets: Vec<f64> = acc.offset.iter().map(CentralMoments::mean).collect();
    let mixed: Vec<Vec<f64>> = (0..nblocks)
        .into_par_iter()
        .map_init(
            || (Rollout::new(d), vec![0.0; d]),
            |(rollout, total), b| {
                // sums[(k·d + j)·5 + u] = Σ N^u R^{4−u}
                let mut sums = vec![0.0; q * d * 5];
                for r in range(b) {
                    rollout.server_update(problem, w0.as_slice(), rate, config.local_steps, config.clip_norm, base.replicate(r as u64), total, None, |k, term, noise| {
                        let scale = weights[k] * rate;
                        if scale <= 0.0 {
                            return;
                        }
                        for j in 0..d {
                            let n = noise[j];
                            let rr = term[j] / scale - n - offsets[k * d + j];
                            let cell = &mut sums[(k * d + j) * 5..(k * d + j + 1) * 5];
                            for (u, s) in cell.iter_mut().enumerate() {
                                *s += n.powi(u as i32) * rr.powi(4 - u as i32);
                            }
                        }
                    });
                }
                sums
            },
        )
        .collect();
    let mut sums = vec![0.0; q * d * 5];
    for m in &mixed {
        sums.iter_mut().zip(m).for_each(|(a, b)| *a += b);
    }
    let n = replicates as f64;
    let ceiling = sums.iter().fold(0.0_f64, |a, s| a.max((s / n).abs()));

    let mut floor = f64::INFINITY;
    for j in 0..d {
        let x: Vec<f64> = (0..q).map(|k| acc.clients[k * d + j].biased_variance()).collect();
        for &xk in &x {
            let spread: f64 = x.iter().map(|xj| (xk - xj).powi(2)).sum::<f64>() / (2.0 * q as f64);
            floor = floor.min(xk * xk - spread);
        }
    }

    let ks = ks_per_coordinate(&values, d)?;
    let mut coordinates = Vec::with_capacity(d);
    for j in 0..d {
        let per_client: Vec<CentralMoments> = (0..q).map(|k| acc.clients[k * d + j]).collect();
        let t = &acc.total[j];
        if !(t.biased_variance() > 0.0) {
            return Err(Error::DegenerateSample(format!("coordinate {j} of A has zero variance")));
        }
        coordinates.push(CoordinateNormality {
            coordinate: j,
            skewness: t.skewness(),
            excess_kurtosis: t.excess_kurtosis(),
            ks_distance: ks[j],
            lyapunov_ratio: lyapunov_from_moments(&per_client)?,
        });
    }
    let cov = acc.cov.covariance();
    let mut corr = 0.0_f64;
    for i in 0..d {
        for j in 0..i {
            corr = corr.max(cov[(i, j)].abs() / (cov[(i, i)] * cov[(j, j)]).sqrt());
        }
    }
    Ok(NormalityReport {
        clients: q,
        replicates,
        lyapunov_ratio: coordinates.iter().fold(0.0, |a, c| a.max(c.lyapunov_ratio)),
        coordinates,
        similarity_floor_estimate: floor,
        fourth_moment_ceiling_estimate: ceiling,
        max_offdiagonal_correlation: corr,
    })
}
