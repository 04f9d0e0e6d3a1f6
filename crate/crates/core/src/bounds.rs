//! Evaluators for the convergence bounds and the client-drift bound, and
//! the comparison of a bound against Monte Carlo measurements.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::format::CsvTable;
use crate::linalg::spectral_norm_sym;
use crate::model::Problem;
use crate::schedule::Schedule;
use crate::sde::MomentEstimate;
use crate::stats::TimeSampler;

/// Constants shared by every bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// `L`.
    pub lipschitz: f64,
    /// `μ`.
    pub smoothness: f64,
    /// `p_k`.
    pub weights: Vec<f64>,
    /// `Tr(Σ_k)`.
    pub noise_traces: Vec<f64>,
    /// `E`.
    pub local_steps: usize,
    /// `h`.
    pub lift: f64,
    /// Estimated `V*`.
    pub v_star: f64,
    /// `F(w₀(0)) − F(w₀*)`.
    pub loss_gap: f64,
    /// `‖w₀(0) − w₀*‖`.
    pub distance: f64,
    /// `τ` of weak quasi-convexity.
    pub tau: f64,
    /// Constant server rate `η₀`.
    pub server_rate: f64,
    /// `d`.
    pub dim: usize,
}

impl BoundInputs {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let scalars = [
            ("L", self.lipschitz),
            ("mu", self.smoothness),
            ("h", self.lift),
            ("V*", self.v_star),
            ("loss gap", self.loss_gap),
            ("distance", self.distance),
            ("tau", self.tau),
            ("eta_0", self.server_rate),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.weights.len() != self.noise_traces.len() {
            out.push(format!("{} weights but {} noise traces", self.weights.len(), self.noise_traces.len()));
        }
        if self.weights.iter().chain(&self.noise_traces).any(|v| !(v.is_finite() && *v >= 0.0)) {
            out.push("weights and noise traces must be finite and >= 0".into());
        }
        if self.local_steps < 1 {
            out.push("E must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d))
        }
    }

    /// `Σ_k p_k (L + √Tr Σ_k)`.
    fn drift_sum(&self) -> f64 {
        self.weights.iter().zip(&self.noise_traces).map(|(p, tr)| p * (self.lipschitz + tr.sqrt())).sum()
    }

    /// `C₁ = E²Lμ Σ p_k (L + √Tr Σ_k) / 2`.
    pub fn c1(&self) -> f64 {
        let e = self.local_steps as f64;
        e * e * self.lipschitz * self.smoothness * self.drift_sum() / 2.0
    }

    /// `C₂ = μE² Σ p_k (L + √Tr Σ_k)`.
    pub fn c2(&self) -> f64 {
        let e = self.local_steps as f64;
        self.smoothness * e * e * self.drift_sum()
    }

    /// `C₃ = d·h·η₀²V*/2 + η₀·C₂·‖w₀(0) − w₀*‖`.
    pub fn c3(&self) -> f64 {
        let eta0 = self.server_rate;
        self.dim as f64 * self.lift * eta0 * eta0 * self.v_star / 2.0 + eta0 * self.c2() * self.distance
    }

    /// Inputs for `problem` with `L`, `μ` measured over a box.
    #[allow(clippy::too_many_arguments)]
    pub fn from_problem(
        problem: &Problem,
        lipschitz: f64,
        smoothness: f64,
        local_steps: usize,
        lift: f64,
        v_star: f64,
        loss_gap: f64,
        distance: f64,
        tau: f64,
        server_rate: f64,
    ) -> Self {
        Self {
            lipschitz,
            smoothness,
            weights: problem.clients().iter().map(|c| c.weight()).collect(),
            noise_traces: problem.clients().iter().map(|c| c.noise_trace()).collect(),
            local_steps,
            lift,
            v_star,
            loss_gap,
            distance,
            tau,
            server_rate,
            dim: problem.dim(),
        }
    }
}

/// `φ(t) = ∫₀ᵗ η`.
pub fn phi(schedule: &Schedule, t: f64) -> f64 {
    schedule.integral(t)
}

fn check_horizon(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("bound horizon must be > 0, got {t}")))
    }
}

/// Non-convex bound with `η₀ = 1`:
/// `gap/(E·φ) + (C₁ + hV*L/2)·∫η² / (E·φ)`.
pub fn theorem1_rhs(inputs: &BoundInputs, schedule: &Schedule, t: f64) -> Result<f64> {
    inputs.validate()?;
    schedule.validate()?;
    check_horizon(t)?;
    let e = inputs.local_steps as f64;
    let phi = schedule.integral(t);
    let noise = inputs.c1() + inputs.lift * inputs.v_star * inputs.lipschitz / 2.0;
    Ok(inputs.loss_gap / (e * phi) + noise * schedule.integral_of_square(t) / (e * phi))
}

/// Asymptotic class of the non-convex bound for `η = 1/(t+1)^b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RateClass {
    /// `1/t^b`, `0 < b < ½`.
    InversePower,
    /// `log(t)/√t`, `b = ½`.
    LogOverSqrt,
    /// `1/t^{1−b}`, `½ < b < 1`.
    InverseComplementPower,
    /// `1/log(t)`, `b = 1`.
    InverseLog,
}

impl RateClass {
    pub fn of(b: f64) -> Result<Self> {
        if !(b > 0.0 && b <= 1.0) {
            return Err(invalid(format!("decay exponent b must be in (0, 1], got {b}")));
        }
        Ok(if b < 0.5 {
            Self::InversePower
        } else if b == 0.5 {
            Self::LogOverSqrt
        } else if b < 1.0 {
            Self::InverseComplementPower
        } else {
            Self::InverseLog
        })
    }

    pub fn label(&self, b: f64) -> String {
        match self {
            Self::InversePower => format!("1/t^{b}"),
            Self::LogOverSqrt => "log(t)/√t".into(),
            Self::InverseComplementPower => format!("1/t^{}", 1.0 - b),
            Self::InverseLog => "1/log(t)".into(),
        }
    }

    /// The rate function itself, up to a constant.
    pub fn rate(&self, b: f64, t: f64) -> f64 {
        match self {
            Self::InversePower => t.powf(-b),
            Self::LogOverSqrt => t.ln() / t.sqrt(),
            Self::InverseComplementPower => t.powf(b - 1.0),
            Self::InverseLog => 1.0 / t.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Corollary1 {
    /// The displayed closed form for `b ∈ {½, 1}`, the exact bound otherwise.
    pub value: f64,
    /// The bound with `∫η²` evaluated exactly.
    pub exact: f64,
    pub class: RateClass,
    pub label: String,
}

/// Non-convex bound for `η = 1/(t+1)^b`. For `b = 1` the displayed form
/// replaces `∫η² = t/(t+1)` by 1, so it slightly exceeds the exact value.
pub fn corollary1_rhs(inputs: &BoundInputs, b: f64, t: f64) -> Result<Corollary1> {
    let class = RateClass::of(b)?;
    let schedule = Schedule::power_decay(b)?;
    let exact = theorem1_rhs(inputs, &schedule, t)?;
    let e = inputs.local_steps as f64;
    let noise = inputs.c1() + inputs.lift * inputs.v_star * inputs.lipschitz / 2.0;
    let value = match class {
        RateClass::InverseLog => (inputs.loss_gap + noise) / (e * t.ln_1p()),
        RateClass::LogOverSqrt => {
            let phi = 2.0 * (t + 1.0).sqrt() - 2.0;
            inputs.loss_gap / (e * phi) + noise * t.ln_1p() / (e * phi)
        }
        _ => exact,
    };
    Ok(Corollary1 { value, exact, class, label: class.label(b) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Corollary2 {
    /// `(gap + η_c²hV*L/2)/(E·η_c·log(t+1)) + η_c·C₁`.
    pub displayed: f64,
    /// Same first term plus `η_c·C₁/E`.
    pub derived: f64,
    /// `t → ∞` value of `displayed`: `η_c·C₁`.
    pub limit: f64,
    /// `t → ∞` value of `derived`: `η_c·C₁/E`.
    pub derived_limit: f64,
}

/// Bound for constant client rate `η_c` and server rate `η₀ = 1/(t+1)`.
/// Passing `t = ∞` returns the limits.
pub fn corollary2_rhs(inputs: &BoundInputs, eta_c: f64, t: f64) -> Result<Corollary2> {
    inputs.validate()?;
    if !(eta_c.is_finite() && eta_c > 0.0) {
        return Err(invalid(format!("η_c must be > 0, got {eta_c}")));
    }
    if !(t > 0.0) {
        return Err(invalid(format!("bound horizon must be > 0, got {t}")));
    }
    let e = inputs.local_steps as f64;
    let numer = inputs.loss_gap + eta_c * eta_c * inputs.lift * inputs.v_star * inputs.lipschitz / 2.0;
    let first = if t.is_infinite() { 0.0 } else { numer / (e * eta_c * t.ln_1p()) };
    let limit = eta_c * inputs.c1();
    Ok(Corollary2 { displayed: first + limit, derived: first + limit / e, limit, derived_limit: limit / e })
}

/// `∫_a^b f` by double-exponential quadrature to `rel` relative accuracy,
/// on subintervals that double in length.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    let mut edges = vec![a];
    let mut x = a + 1.0;
    while x < b {
        edges.push(x);
        x = a + 2.0 * (x - a);
    }
    edges.push(b);
    let rough: f64 = edges.windows(2).map(|w| quadrature::integrate(&f, w[0], w[1], 1e-6).integral).sum();
    let tol = (rel * rough.abs()).max(f64::MIN_POSITIVE) / edges.len() as f64;
    edges.windows(2).map(|w| quadrature::integrate(&f, w[0], w[1], tol).integral).sum()
}

/// Weakly quasi-convex bound with constant server rate `η₀`:
/// `‖Δ‖/(τη₀φ) + η₀²C₂/(τη₀φ)·∫η(s)²(LE·φ(s) + √h·V*·√∫₀ˢη²) ds
/// + C₃/(τη₀φ)·∫η²`. The outer integral uses adaptive quadrature.
pub fn theorem2_rhs(inputs: &BoundInputs, schedule: &Schedule, t: f64) -> Result<f64> {
    inputs.validate()?;
    schedule.validate()?;
    check_horizon(t)?;
    if !(inputs.tau > 0.0) {
        return Err(invalid(format!("τ must be > 0, got {}", inputs.tau)));
    }
    if !(inputs.server_rate > 0.0) {
        return Err(invalid("theorem 2 needs a constant server rate η₀ > 0"));
    }
    let (eta0, tau) = (inputs.server_rate, inputs.tau);
    let denom = tau * eta0 * schedule.integral(t);
    let le = inputs.lipschitz * inputs.local_steps as f64;
    let sv = inputs.lift.sqrt() * inputs.v_star;
    let inner = |s: f64| {
        let eta = schedule.value(s);
        eta * eta * (le * schedule.integral(s) + sv * schedule.integral_of_square(s).sqrt())
    };
    let outer = integrate(inner, 0.0, t, 1e-9);
    Ok(inputs.distance / denom + eta0 * eta0 * inputs.c2() * outer / denom + inputs.c3() * schedule.integral_of_square(t) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Corollary4 {
    /// The displayed two-term form, an upper bound on `exact`.
    pub displayed: f64,
    /// The weakly quasi-convex bound for `η = 1/(t+1)` in closed form.
    pub exact: f64,
}

/// Weakly quasi-convex bound for `η = 1/(t+1)` and constant `η₀`.
pub fn corollary4_rhs(inputs: &BoundInputs, t: f64) -> Result<Corollary4> {
    inputs.validate()?;
    check_horizon(t)?;
    if !(inputs.tau > 0.0 && inputs.server_rate > 0.0) {
        return Err(invalid("corollary 4 needs τ > 0 and η₀ > 0"));
    }
    let (eta0, tau) = (inputs.server_rate, inputs.tau);
    let log = t.ln_1p();
    let denom = tau * eta0 * log;
    let (c2, c3) = (inputs.c2(), inputs.c3());
    let le = inputs.lipschitz * inputs.local_steps as f64;
    let sv = inputs.lift.sqrt() * inputs.v_star;
    let frac = t / (t + 1.0);
    // ∫ log(1+s)/(1+s)² = (t − log(1+t))/(1+t), ∫ √s/(1+s)^{5/2} = (2/3)(t/(1+t))^{3/2}
    let exact = inputs.distance / denom
        + eta0 * eta0 * c2 / denom * (le * (t - log) / (t + 1.0) + sv * 2.0 / 3.0 * frac.powf(1.5))
        + c3 / denom * frac;
    let displayed = eta0 * eta0 * c2 * le / (tau * eta0) * (t - log) / (t * log) + (inputs.distance + c3 + eta0 * eta0 * c2 * sv) / denom;
    Ok(Corollary4 { displayed, exact })
}

/// Expected client drift after `i` local steps is at most
/// `i·η·(L + √Tr Σ_k)`.
pub fn drift_bound(i: usize, eta: f64, lipschitz: f64, noise_trace: f64) -> f64 {
    i as f64 * eta * (lipschitz + noise_trace.sqrt())
}

/// Running maximum of `‖V̂/η²‖_S` over visited states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct VStarEstimator {
    pub estimate: f64,
    pub states: usize,
}

impl VStarEstimator {
    pub fn observe_covariance(&mut self, covariance: &DMatrix<f64>, rate: f64) -> Result<()> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(invalid(format!("client rate must be > 0 to unscale V̂, got {rate}")));
        }
        self.estimate = self.estimate.max(spectral_norm_sym(covariance) / (rate * rate));
        self.states += 1;
        Ok(())
    }

    pub fn observe(&mut self, m: &MomentEstimate, rate: f64) -> Result<()> {
        self.observe_covariance(&m.covariance, rate)
    }
}

/// `V*` from `(η(t), M̂/V̂ estimate)` pairs along a trajectory.
pub fn estimate_vstar(states: &[(f64, MomentEstimate)]) -> Result<f64> {
    if states.is_empty() {
        return Err(invalid("V* needs at least one visited state"));
    }
    let mut est = VStarEstimator::default();
    for (rate, m) in states {
        est.observe(m, *rate)?;
    }
    Ok(est.estimate)
}

/// `(Tr(AB), d·‖A‖_S·‖B‖_S)` for symmetric `A`, `B`.
pub fn trace_product_bound(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, f64)> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(invalid("trace bound needs square matrices of equal size"));
    }
    let lhs = (a * b).trace();
    Ok((lhs, a.nrows() as f64 * spectral_norm_sym(a) * spectral_norm_sym(b)))
}

/// One Monte Carlo measurement of a bound's left-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t: f64,
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheckpoint {
    pub t: f64,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    /// `rhs − lhs_mean`; negative means the bound is exceeded on average.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub checkpoints: Vec<BoundCheckpoint>,
    /// Pass iff `lhs ≤ rhs + 3·SE` at every checkpoint.
    pub verdict: bool,
}

impl BoundReport {
    /// Columns `t, lhs_mean, lhs_se, rhs, margin`.
    pub fn to_csv(&self) -> String {
        let mut table = CsvTable::new(["t", "lhs_mean", "lhs_se", "rhs", "margin"]);
        for c in &self.checkpoints {
            table.push_row(&[], &[c.t, c.lhs_mean, c.lhs_se, c.rhs, c.margin]);
        }
        table.render()
    }
}

/// Compares measurements with `(t, rhs)` values on the same time grid.
pub fn compare_bound(measured: &[Measurement], rhs: &[(f64, f64)]) -> Result<BoundReport> {
    if measured.is_empty() {
        return Err(invalid("no checkpoints to compare"));
    }
    if measured.len() != rhs.len() || measured.iter().zip(rhs).any(|(m, r)| m.t != r.0) {
        return Err(invalid("measured and bound checkpoint grids differ"));
    }
    let checkpoints: Vec<BoundCheckpoint> = measured
        .iter()
        .zip(rhs)
        .map(|(m, &(t, r))| BoundCheckpoint {
            t,
            lhs_mean: m.mean,
            lhs_se: m.standard_error,
            rhs: r,
            margin: r - m.mean,
            pass: m.mean <= r + 3.0 * m.standard_error,
        })
        .collect();
    let verdict = checkpoints.iter().all(|c| c.pass);
    Ok(BoundReport { checkpoints, verdict })
}

/// Average of a per-round series at `draws` random times `t̃ ~ sampler`,
/// reading the state of the round in progress at `t̃` (round `⌊t̃/h⌋`).
pub fn time_averaged<R: Rng + ?Sized>(series: &[f64], lift: f64, sampler: &TimeSampler, draws: usize, rng: &mut R) -> Result<f64> {
    if draws == 0 {
        return Err(invalid("need at least one time draw"));
    }
    let last = (sampler.horizon / lift).floor() as usize;
    if series.len() <= last.saturating_sub(1) {
        return Err(invalid(format!("series has {} rounds, horizon needs {}", series.len(), last)));
    }
    let mut sum = 0.0;
    for _ in 0..draws {
        let s = sampler.sample(rng);
        let idx = ((s / lift).floor() as usize).min(series.len() - 1);
        sum += series[idx];
    }
    Ok(sum / draws as f64)
}

/// Mean and standard error of independent per-run values.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use std::f64::consts::E;

    fn inputs() -> BoundInputs {
        BoundInputs {
            lipschitz: 2.0,
            smoothness: 3.0,
            weights: vec![0.25, 0.75],
            noise_traces: vec![0.04, 0.09],
            local_steps: 2,
            lift: 0.1,
            v_star: 0.5,
            loss_gap: 1.3,
            distance: 0.8,
            tau: 1.0,
            server_rate: 1.0,
            dim: 3,
        }
    }

    fn bare(gap: f64, e: usize) -> BoundInputs {
        BoundInputs { lipschitz: 0.0, smoothness: 0.0, v_star: 0.0, loss_gap: gap, local_steps: e, ..inputs() }
    }

    #[test]
    fn constants() {
        let b = inputs();
        // Σ p(L + √tr) = 0.25·2.2 + 0.75·2.3 = 2.275
        assert!((b.c1() - 4.0 * 2.0 * 3.0 * 2.275 / 2.0).abs() < 1e-12);
        assert!((b.c2() - 3.0 * 4.0 * 2.275).abs() < 1e-12);
        assert!((b.c3() - (3.0 * 0.1 * 0.5 / 2.0 + b.c2() * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn phi_examples() {
        assert!((phi(&Schedule::harmonic(), E - 1.0) - 1.0).abs() < 1e-15);
        assert!((phi(&Schedule::constant(0.2).unwrap(), 5.0) - 1.0).abs() < 1e-15);
        assert!((phi(&Schedule::InverseSqrt, 3.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn theorem1_deterministic_examples() {
        let r = theorem1_rhs(&bare(1.0, 2), &Schedule::harmonic(), E - 1.0).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        let s = Schedule::InverseSqrt;
        let r = theorem1_rhs(&bare(0.7, 3), &s, 8.0).unwrap();
        assert!((r - 0.7 / (3.0 * s.integral(8.0))).abs() < 1e-15);
        assert!(theorem1_rhs(&inputs(), &s, 0.0).is_err());
    }

    #[test]
    fn theorem1_closed_form_matches_quadrature() {
        let b = inputs();
        for s in [Schedule::harmonic(), Schedule::InverseSqrt, Schedule::power_decay(0.3).unwrap(), Schedule::constant(0.1).unwrap()] {
            for t in [0.5, 10.0, 1000.0] {
                let e = b.local_steps as f64;
                let phi = integrate(|x| s.value(x), 0.0, t, 1e-12);
                let noise = integrate(|x| (b.c1() + b.lift * b.v_star * b.lipschitz / 2.0) * s.value(x).powi(2), 0.0, t, 1e-12);
                let oracle = b.loss_gap / (e * phi) + noise / (e * phi);
                let r = theorem1_rhs(&b, &s, t).unwrap();
                assert!((r - oracle).abs() <= 1e-9 * oracle, "{s:?} t={t}");
            }
        }
    }

    #[test]
    fn theorem1_decreases_for_harmonic() {
        let b = inputs();
        let mut prev = f64::INFINITY;
        for i in 3..200 {
            let r = theorem1_rhs(&b, &Schedule::harmonic(), i as f64).unwrap();
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn corollary1_classes() {
        let b = inputs();
        assert_eq!(corollary1_rhs(&b, 0.5, 10.0).unwrap().label, "log(t)/√t");
        assert_eq!(corollary1_rhs(&b, 1.0, 10.0).unwrap().label, "1/log(t)");
        assert_eq!(corollary1_rhs(&b, 0.25, 10.0).unwrap().label, "1/t^0.25");
        assert_eq!(corollary1_rhs(&b, 0.75, 10.0).unwrap().class, RateClass::InverseComplementPower);
        assert!(corollary1_rhs(&b, 0.0, 10.0).is_err());
        assert!(corollary1_rhs(&b, 1.5, 10.0).is_err());
    }

    #[test]
    fn corollary1_closed_forms() {
        let b = inputs();
        let half = corollary1_rhs(&b, 0.5, 50.0).unwrap();
        assert!((half.value - half.exact).abs() < 1e-12 * half.exact);
        let one = corollary1_rhs(&b, 1.0, 50.0).unwrap();
        assert!(one.value >= one.exact);
        assert!((one.value - one.exact) / one.exact < 0.05);
    }

    #[test]
    fn corollary1_rate_envelope() {
        // RHS / rate stays bounded as t grows
        let b = inputs();
        for exp in [0.25, 0.5, 0.75, 1.0] {
            let c = corollary1_rhs(&b, exp, 1e3).unwrap();
            let ratio = |t: f64| corollary1_rhs(&b, exp, t).unwrap().exact / c.class.rate(exp, t);
            assert!(ratio(1e8) < 2.0 * ratio(1e4), "b={exp}");
        }
    }

    #[test]
    fn corollary2_limits() {
        let b = inputs();
        let far = corollary2_rhs(&b, 0.1, f64::INFINITY).unwrap();
        assert_eq!(far.displayed, 0.1 * b.c1());
        assert_eq!(far.limit, 0.1 * b.c1());
        assert_eq!(far.derived, far.derived_limit);
        let half = corollary2_rhs(&b, 0.05, f64::INFINITY).unwrap();
        assert!((half.limit * 2.0 - far.limit).abs() < 1e-15);
        let at = corollary2_rhs(&b, 0.1, E - 1.0).unwrap();
        let first = (b.loss_gap + 0.01 * b.lift * b.v_star * b.lipschitz / 2.0) / (2.0 * 0.1);
        assert!((at.displayed - at.limit - first).abs() < 1e-12);
        assert!((at.derived - at.derived_limit - first).abs() < 1e-12);
    }

    #[test]
    fn theorem2_deterministic_and_tau_scaling() {
        let d = BoundInputs { smoothness: 0.0, v_star: 0.0, ..inputs() };
        assert_eq!(d.c2(), 0.0);
        let s = Schedule::harmonic();
        let r = theorem2_rhs(&d, &s, 10.0).unwrap();
        assert!((r - 0.8 / 11.0_f64.ln()).abs() < 1e-15);
        let b = inputs();
        let r1 = theorem2_rhs(&b, &s, 10.0).unwrap();
        let r2 = theorem2_rhs(&BoundInputs { tau: 2.0, ..b.clone() }, &s, 10.0).unwrap();
        assert!((r1 / r2 - 2.0).abs() < 1e-12);
        assert!(theorem2_rhs(&BoundInputs { tau: 0.0, ..b }, &s, 10.0).is_err());
    }

    #[test]
    fn corollary4_exact_matches_theorem2() {
        let b = inputs();
        for t in [0.5, 10.0, 100.0, 1e4] {
            let q = theorem2_rhs(&b, &Schedule::harmonic(), t).unwrap();
            let c = corollary4_rhs(&b, t).unwrap();
            assert!((c.exact - q).abs() <= 1e-9 * q, "t={t}: {} vs {q}", c.exact);
            assert!(c.displayed >= c.exact);
        }
    }

    #[test]
    fn corollary4_vanishes() {
        let b = inputs();
        let c = corollary4_rhs(&b, 1e300).unwrap();
        assert!(c.displayed < 0.02 * corollary4_rhs(&b, 10.0).unwrap().displayed);
    }

    #[test]
    fn drift_bound_examples() {
        assert_eq!(drift_bound(0, 0.1, 2.0, 4.0), 0.0);
        assert!((drift_bound(3, 0.1, 2.0, 4.0) - 1.2).abs() < 1e-15);
        assert!((drift_bound(4, 0.5, 2.0, 0.0) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn vstar_running_max() {
        let mut v = VStarEstimator::default();
        v.observe_covariance(&DMatrix::zeros(2, 2), 0.1).unwrap();
        assert_eq!(v.estimate, 0.0);
        v.observe_covariance(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.02, 0.01])), 0.1).unwrap();
        assert!((v.estimate - 2.0).abs() < 1e-12);
        v.observe_covariance(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.001, 0.0])), 0.1).unwrap();
        assert!((v.estimate - 2.0).abs() < 1e-12);
        assert!(v.observe_covariance(&DMatrix::zeros(2, 2), 0.0).is_err());
        assert!(estimate_vstar(&[]).is_err());
    }

    #[test]
    fn compare_bound_rule() {
        let m = [Measurement { t: 10.0, mean: 0.0, standard_error: 0.0 }, Measurement { t: 100.0, mean: 0.0, standard_error: 0.0 }];
        assert!(compare_bound(&m, &[(10.0, 1.0), (100.0, 0.5)]).unwrap().verdict);
        let m = [Measurement { t: 10.0, mean: 2.0, standard_error: 0.1 }];
        let r = compare_bound(&m, &[(10.0, 1.0)]).unwrap();
        assert!(!r.verdict);
        assert!((r.checkpoints[0].margin + 1.0).abs() < 1e-15);
        assert!(compare_bound(&m, &[(11.0, 1.0)]).is_err());
        assert!(compare_bound(&[], &[]).is_err());
        assert!(r.to_csv().starts_with("t,lhs_mean,lhs_se,rhs,margin\n"));
    }

    #[test]
    fn time_average_of_constant_series() {
        let sampler = TimeSampler::new(Schedule::harmonic(), 10.0).unwrap();
        let mut rng = crate::rng::StreamKey::new(1, crate::rng::Purpose::TimeSample).rng();
        let avg = time_averaged(&[2.0; 11], 1.0, &sampler, 100, &mut rng).unwrap();
        assert_eq!(avg, 2.0);
        assert!(time_averaged(&[2.0; 3], 1.0, &sampler, 100, &mut rng).is_err());
    }

    fn sym(d: usize, raw: &[f64]) -> DMatrix<f64> {
        let m = DMatrix::from_iterator(d, d, raw.iter().copied());
        (&m + m.transpose()) * 0.5
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(1000))]

        #[test]
        fn trace_product_within_bound(d in 1usize..5, raw in proptest::collection::vec(-10.0f64..10.0, 32)) {
            let a = sym(d, &raw[..d * d]);
            let b = sym(d, &raw[16..16 + d * d]);
            let (lhs, rhs) = trace_product_bound(&a, &b).unwrap();
            proptest::prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn theorem2_scales_inversely_with_tau(tau in 0.1f64..10.0, t in 0.5f64..500.0) {
            let b = inputs();
            let s = Schedule::harmonic();
            let base = theorem2_rhs(&b, &s, t).unwrap();
            let r = theorem2_rhs(&BoundInputs { tau, ..b }, &s, t).unwrap();
            proptest::prop_assert!((r * tau - base).abs() <= 1e-12 * base);
        }
    }
}
