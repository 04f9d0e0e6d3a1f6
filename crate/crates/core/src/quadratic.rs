//! Closed forms for quadratic clients: the distribution of an `E`-step local
//! update, the linear (Ornstein–Uhlenbeck) SDE of the one-dimensional case,
//! and its Gaussian solution.
//!
//! Time in the linear SDE is measured in its own units: with `h·η₀ = 1`, one
//! aggregation round corresponds to `η` units, since the drift carries no
//! explicit `η`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::format::CsvTable;
use crate::linalg::check_square;
use crate::model::{Client, ClientLoss, Problem};
use crate::sde::DiffusionProcess;

/// How the noise of an `E`-step local update is combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    /// The displayed sum of Gaussian terms taken literally: all terms share
    /// one draw, so their standard deviations add.
    #[default]
    PaperVerbatim,
    /// Covariance propagated exactly through the linear recursion.
    ExactMoment,
}

/// Mean and covariance of `w^k` after `E` local steps from `w0`.
pub fn local_update_distribution(
    u: &DMatrix<f64>,
    a: &DVector<f64>,
    sigma: &DMatrix<f64>,
    eta: f64,
    local_steps: usize,
    w0: &DVector<f64>,
    mode: CovarianceMode,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = w0.len();
    check_square(u, d)?;
    check_square(sigma, d)?;
    if a.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.len() });
    }
    if local_steps < 1 {
        return Err(invalid("E must be >= 1"));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(invalid(format!("η must be > 0, got {eta}")));
    }
    let id = DMatrix::<f64>::identity(d, d);
    let p = &id - u * eta;
    // powers[j] = (I − ηU)^j for j < E
    let mut powers = Vec::with_capacity(local_steps);
    powers.push(id.clone());
    for j in 1..local_steps {
        powers.push(&p * &powers[j - 1]);
    }
    let drift_sum = powers.iter().fold(DMatrix::zeros(d, d), |s, pj| s + pj * u);
    let mean = w0 - (&drift_sum * (w0 - a)) * eta;
    let cov = match mode {
        CovarianceMode::ExactMoment => powers.iter().fold(DMatrix::zeros(d, d), |s, pj| s + pj * sigma * pj.transpose()) * (eta * eta),
        CovarianceMode::PaperVerbatim => {
            let mut k = &id * local_steps as f64;
            for j in 0..local_steps {
                for i in 1..=j {
                    k += &powers[j - i] * u;
                }
            }
            &k * sigma * k.transpose() * (eta * eta)
        }
    };
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// One client of the one-dimensional quadratic case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarClient {
    pub weight: f64,
    /// `U_k > 0`.
    pub curvature: f64,
    /// `a_k`.
    pub center: f64,
    /// `Σ_k ≥ 0`.
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticCase1D {
    pub clients: Vec<ScalarClient>,
    /// `η`, constant client rate.
    pub eta: f64,
    /// `E`.
    pub local_steps: usize,
    pub w_init: f64,
}

impl QuadraticCase1D {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.clients.is_empty() {
            out.push("at least one client is required".into());
        }
        let total: f64 = self.clients.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            out.push(format!("client weights sum to {total}, expected 1"));
        }
        for (k, c) in self.clients.iter().enumerate() {
            if !(c.weight.is_finite() && (0.0..=1.0).contains(&c.weight)) {
                out.push(format!("client {k}: weight must be in [0, 1], got {}", c.weight));
            }
            if !(c.curvature.is_finite() && c.curvature > 0.0) {
                out.push(format!("client {k}: curvature U must be > 0, got {}", c.curvature));
            }
            if !c.center.is_finite() {
                out.push(format!("client {k}: center must be finite"));
            }
            if !(c.noise_variance.is_finite() && c.noise_variance >= 0.0) {
                out.push(format!("client {k}: noise variance must be >= 0 (PSD), got {}", c.noise_variance));
            }
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            out.push(format!("η must be > 0, got {}", self.eta));
        }
        if self.local_steps < 1 {
            out.push("E must be >= 1 (local_steps)".into());
        }
        if !self.w_init.is_finite() {
            out.push("w_init must be finite".into());
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

    /// Clients whose local recursion does not contract, `|1 − ηU_k| ≥ 1`.
    pub fn contraction_warnings(&self) -> Vec<String> {
        self.clients
            .iter()
            .enumerate()
            .filter(|(_, c)| (1.0 - self.eta * c.curvature).abs() >= 1.0)
            .map(|(k, c)| format!("client {k}: |1 − ηU| = {} >= 1, local steps do not contract", (1.0 - self.eta * c.curvature).abs()))
            .collect()
    }

    /// The same clients as a general [`Problem`].
    pub fn to_problem(&self) -> Result<Problem> {
        self.validate()?;
        let clients = self
            .clients
            .iter()
            .map(|c| Client::new(c.weight, ClientLoss::quadratic_1d(c.curvature, c.center)?, DMatrix::from_element(1, 1, c.noise_variance)))
            .collect::<Result<Vec<_>>>()?;
        Problem::new(clients)
    }

    /// `Σ_k p_k U_k a_k / Σ_k p_k U_k`, the global minimizer.
    pub fn global_minimizer(&self) -> f64 {
        let num: f64 = self.clients.iter().map(|c| c.weight * c.curvature * c.center).sum();
        let den: f64 = self.clients.iter().map(|c| c.weight * c.curvature).sum();
        num / den
    }
}

/// `Σ_{j<E} (1 − ηU)^j`.
fn geometric(eta: f64, u: f64, e: usize) -> f64 {
    let r = 1.0 - eta * u;
    (0..e).map(|j| r.powi(j as i32)).sum()
}

/// Drift rate `A` and diffusion amplitude `B` of
/// `dX = −A(X − C₄) dt + √η·B dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdeCoefficients {
    pub a_coef: f64,
    pub b_coef: f64,
    pub c4: f64,
}

pub fn sde_coefficients(case: &QuadraticCase1D, mode: CovarianceMode) -> Result<SdeCoefficients> {
    case.validate()?;
    let (eta, e) = (case.eta, case.local_steps);
    let mut a_coef = 0.0;
    let mut weighted_center = 0.0;
    for c in &case.clients {
        let g = c.weight * geometric(eta, c.curvature, e) * c.curvature;
        a_coef += g;
        weighted_center += g * c.center;
    }
    let b_coef = match mode {
        CovarianceMode::PaperVerbatim => {
            let mut bracket = e as f64;
            for c in &case.clients {
                let r = 1.0 - eta * c.curvature;
                for j in 0..e {
                    for i in 1..=j {
                        bracket += c.weight * c.noise_variance.sqrt() * r.powi((j - i) as i32) * c.curvature;
                    }
                }
            }
            bracket
        }
        // one round is η time units, so B² = Var(A)/η² = Σ p_k² Σ_{i<E} (1−ηU_k)^{2i} Σ_k
        CovarianceMode::ExactMoment => case
            .clients
            .iter()
            .map(|c| {
                let r2 = (1.0 - eta * c.curvature).powi(2);
                c.weight * c.weight * c.noise_variance * (0..e).map(|i| r2.powi(i as i32)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt(),
    };
    Ok(SdeCoefficients { a_coef, b_coef, c4: weighted_center / a_coef })
}

/// Gaussian law `N(m₀(t), v₀(t))` of the linear SDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalyticSolution {
    pub a_coef: f64,
    pub b_coef: f64,
    pub c4: f64,
    pub eta: f64,
    pub w_init: f64,
    pub mode: CovarianceMode,
}

/// Variance from the moment ODE, with the closed form as displayed
/// (`e^{−At}` instead of `e^{−2At}`) alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceForms {
    pub ode: f64,
    pub paper_form: f64,
}

impl AnalyticSolution {
    pub fn new(case: &QuadraticCase1D, mode: CovarianceMode) -> Result<Self> {
        let c = sde_coefficients(case, mode)?;
        if !(c.a_coef > 0.0) {
            return Err(invalid(format!("drift rate A must be > 0, got {}", c.a_coef)));
        }
        Ok(Self { a_coef: c.a_coef, b_coef: c.b_coef, c4: c.c4, eta: case.eta, w_init: case.w_init, mode })
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.c4 + (self.w_init - self.c4) * (-self.a_coef * t).exp()
    }

    pub fn stationary_variance(&self) -> f64 {
        self.eta * self.b_coef * self.b_coef / (2.0 * self.a_coef)
    }

    pub fn variance(&self, t: f64) -> VarianceForms {
        let s = self.stationary_variance();
        VarianceForms { ode: -s * (-2.0 * self.a_coef * t).exp_m1(), paper_form: -s * (-self.a_coef * t).exp_m1() }
    }

    /// Columns `t, m_0, v_0_ode, v_0_paper_form`.
    pub fn to_csv(&self, times: &[f64]) -> String {
        let mut table = CsvTable::new(["t", "m_0", "v_0_ode", "v_0_paper_form"]);
        for &t in times {
            let v = self.variance(t);
            table.push_row(&[], &[t, self.mean(t), v.ode, v.paper_form]);
        }
        table.render()
    }
}

pub fn analytic_mean(case: &QuadraticCase1D, t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(AnalyticSolution::new(case, CovarianceMode::PaperVerbatim)?.mean(t))
}

pub fn analytic_variance(case: &QuadraticCase1D, mode: CovarianceMode, t: f64) -> Result<VarianceForms> {
    check_time(t)?;
    Ok(AnalyticSolution::new(case, mode)?.variance(t))
}

/// `(C₄, ηB²/(2A))`, the `t → ∞` law.
pub fn stationary_limit(case: &QuadraticCase1D, mode: CovarianceMode) -> Result<(f64, f64)> {
    let s = AnalyticSolution::new(case, mode)?;
    Ok((s.c4, s.stationary_variance()))
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("t must be >= 0, got {t}")))
    }
}

/// The linear SDE as a [`DiffusionProcess`], for Euler–Maruyama checks of
/// the analytic solution.
#[derive(Debug, Clone, Copy)]
pub struct LinearSde1D {
    pub a_coef: f64,
    pub c4: f64,
    /// Constant diffusion `√η·B`.
    pub sigma: f64,
}

impl From<&AnalyticSolution> for LinearSde1D {
    fn from(s: &AnalyticSolution) -> Self {
        Self { a_coef: s.a_coef, c4: s.c4, sigma: s.eta.sqrt() * s.b_coef }
    }
}

impl DiffusionProcess for LinearSde1D {
    type Scratch = ();

    fn dim(&self) -> usize {
        1
    }

    fn scratch(&self) {}

    fn coefficients(&self, _t: f64, x: &[f64], _path: usize, _step: usize, _: &mut (), drift: &mut [f64], diffusion: &mut DMatrix<f64>) -> Result<()> {
        drift[0] = -self.a_coef * (x[0] - self.c4);
        diffusion[(0, 0)] = self.sigma;
        Ok(())
    }
}
