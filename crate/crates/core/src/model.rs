//! Federated objectives: per-client loss landscapes, their gradients, the
//! Gaussian gradient-noise covariances and the constants the convergence
//! bounds are stated in.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, PsdRoot};

/// Tolerance on `Σ p_k = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Model parameters `w ∈ ℝᵈ`, `d ≥ 1`, all entries finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct WeightVector(DVector<f64>);

impl WeightVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(coords))
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(invalid("weight vector must have dimension >= 1"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weight vector".into()));
        }
        Ok(Self(v))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "weight vector must have dimension >= 1");
        Self(DVector::zeros(dim))
    }

    pub(crate) fn from_slice_unchecked(s: &[f64]) -> Self {
        Self(DVector::from_column_slice(s))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = DVector<f64>;

    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Vec<f64> {
        w.0.as_slice().to_vec()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

/// One client's loss landscape.
///
/// `SyntheticSmooth` is `½(w−a)ᵀU(w−a) + ε·Σⱼ sin(wⱼ)`: a quadratic plus a
/// bounded sine ripple that makes the landscape non-convex when `ε` exceeds
/// the smallest curvature of `U`.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientLoss {
    Quadratic { hessian: DMatrix<f64>, center: DVector<f64> },
    SyntheticSmooth { hessian: DMatrix<f64>, center: DVector<f64>, amplitude: f64 },
}

impl ClientLoss {
    pub fn quadratic(hessian: DMatrix<f64>, center: DVector<f64>) -> Result<Self> {
        validate_quadratic_part(&hessian, &center)?;
        Ok(Self::Quadratic { hessian, center })
    }

    pub fn synthetic_smooth(hessian: DMatrix<f64>, center: DVector<f64>, amplitude: f64) -> Result<Self> {
        validate_quadratic_part(&hessian, &center)?;
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(invalid(format!("sine amplitude must be finite and >= 0, got {amplitude}")));
        }
        Ok(Self::SyntheticSmooth { hessian, center, amplitude })
    }

    /// Scalar convenience for the 1-D quadratic case.
    pub fn quadratic_1d(curvature: f64, center: f64) -> Result<Self> {
        Self::quadratic(DMatrix::from_element(1, 1, curvature), DVector::from_element(1, center))
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        match self {
            Self::Quadratic { hessian, .. } | Self::SyntheticSmooth { hessian, .. } => hessian,
        }
    }

    pub fn center(&self) -> &DVector<f64> {
        match self {
            Self::Quadratic { center, .. } | Self::SyntheticSmooth { center, .. } => center,
        }
    }

    /// Sine amplitude `ε`; zero for a plain quadratic.
    pub fn amplitude(&self) -> f64 {
        match self {
            Self::Quadratic { .. } => 0.0,
            Self::SyntheticSmooth { amplitude, .. } => *amplitude,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Self::Quadratic { .. }) || self.amplitude() == 0.0
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let u = self.hessian();
        let a = self.center();
        let d = a.len();
        let mut quad = 0.0;
        for j in 0..d {
            let dj = w[j] - a[j];
            for i in 0..d {
                quad += (w[i] - a[i]) * u[(i, j)] * dj;
            }
        }
        let eps = self.amplitude();
        let ripple = if eps == 0.0 { 0.0 } else { eps * w.iter().map(|x| x.sin()).sum::<f64>() };
        0.5 * quad + ripple
    }

    /// `∇F(w)` written into `out` without allocating.
    #[inline]
    pub fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        let u = self.hessian();
        let a = self.center();
        let d = a.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        let data = u.as_slice();
        for j in 0..d {
            let dj = w[j] - a[j];
            if dj == 0.0 {
                continue;
            }
            let col = &data[j * d..(j + 1) * d];
            for (o, &uij) in out.iter_mut().zip(col) {
                *o += uij * dj;
            }
        }
        let eps = self.amplitude();
        if eps != 0.0 {
            for (o, &x) in out.iter_mut().zip(w) {
                *o += eps * x.cos();
            }
        }
    }

    pub fn gradient(&self, w: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(w.len());
        self.gradient_into(w, g.as_mut_slice());
        g
    }

    /// Diagonal of the Hessian at `w`.
    pub fn hessian_diagonal(&self, w: &[f64]) -> DVector<f64> {
        let u = self.hessian();
        let eps = self.amplitude();
        DVector::from_fn(w.len(), |j, _| u[(j, j)] - eps * w[j].sin())
    }
}

fn validate_quadratic_part(hessian: &DMatrix<f64>, center: &DVector<f64>) -> Result<()> {
    if center.is_empty() {
        return Err(invalid("client loss must have dimension >= 1"));
    }
    if center.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("client loss center".into()));
    }
    linalg::check_square(hessian, center.len())?;
    linalg::check_psd(hessian)
}

/// A client: aggregation weight `p_k`, loss landscape and the covariance
/// `Σ_k` of its stochastic-gradient noise.
#[derive(Debug, Clone)]
pub struct Client {
    weight: f64,
    loss: ClientLoss,
    noise_covariance: DMatrix<f64>,
    noise_root: DMatrix<f64>,
}

impl Client {
    pub fn new(weight: f64, loss: ClientLoss, noise_covariance: DMatrix<f64>) -> Result<Self> {
        if !(weight.is_finite() && (0.0..=1.0).contains(&weight)) {
            return Err(invalid(format!("client weight must lie in [0, 1], got {weight}")));
        }
        linalg::check_square(&noise_covariance, loss.dim())?;
        linalg::check_psd(&noise_covariance)?;
        let PsdRoot { root, .. } = linalg::psd_sqrt(&noise_covariance)?;
        Ok(Self { weight, loss, noise_covariance, noise_root: root })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn loss(&self) -> &ClientLoss {
        &self.loss
    }

    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_covariance
    }

    /// Symmetric square root of `Σ_k`, used to colour standard normal draws.
    pub fn noise_root(&self) -> &DMatrix<f64> {
        &self.noise_root
    }

    pub fn noise_trace(&self) -> f64 {
        self.noise_covariance.trace()
    }
}

/// Axis-aligned box `[lower, upper]` over which `L` and `μ` are computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::DimensionMismatch { expected: self.lower.len(), got: self.upper.len() });
        }
        if self.lower.is_empty() {
            return Err(invalid("box must have dimension >= 1"));
        }
        for (j, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(invalid(format!("box is unbounded along coordinate {j}")));
            }
            if lo > hi {
                return Err(invalid(format!("box lower bound exceeds upper bound along coordinate {j}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Same center, every half-width multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| {
                let c = 0.5 * (lo + hi);
                let r = 0.5 * (hi - lo) * factor;
                (c - r, c + r)
            })
            .unzip();
        Self::new(lower, upper)
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        w.len() == self.dim() && w.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (lo, hi))| lo <= x && x <= hi)
    }
}

/// `L` bounds `‖∇F^k‖_∞` and `‖diag ∇²F^k‖_∞` over `domain`; `μ` is the
/// gradient-Lipschitz modulus shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub lipschitz: f64,
    pub smoothness: f64,
    pub domain: BoxDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WqcReport {
    pub holds: bool,
    /// Smallest `⟨∇F(w), w−w*⟩ − τ(F(w) − F(w*))` over all probes and losses.
    pub worst_margin: f64,
    pub worst_probe: usize,
}

/// The federated objective `F(w) = Σ p_k F^k(w)`.
#[derive(Debug, Clone)]
pub struct Problem {
    dim: usize,
    clients: Vec<Client>,
}

impl Problem {
    pub fn new(clients: Vec<Client>) -> Result<Self> {
        let first = clients.first().ok_or_else(|| invalid("problem needs at least one client"))?;
        let dim = first.loss.dim();
        for c in &clients {
            if c.loss.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.loss.dim() });
            }
        }
        let total: f64 = clients.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::WeightsNotNormalized(total));
        }
        Ok(Self { dim, clients })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client(&self, k: usize) -> Result<&Client> {
        self.clients
            .get(k)
            .ok_or_else(|| invalid(format!("client index {k} out of range ({} clients)", self.clients.len())))
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn is_quadratic(&self) -> bool {
        self.clients.iter().all(|c| c.loss.is_quadratic())
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: w.len() });
        }
        Ok(())
    }

    /// Exact `∇F^k(w)`.
    pub fn client_gradient(&self, k: usize, w: &WeightVector) -> Result<WeightVector> {
        self.check_dim(w.as_slice())?;
        let g = self.client(k)?.loss.gradient(w.as_slice());
        WeightVector::from_vector(g).map_err(|_| Error::NonFinite(format!("gradient of client {k}")))
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.clients.iter().map(|c| c.weight * c.loss.value(w)).sum()
    }

    /// `F(w)` and `∇F(w)` as `p_k`-weighted sums.
    pub fn loss_and_gradient(&self, w: &WeightVector) -> Result<(f64, WeightVector)> {
        self.check_dim(w.as_slice())?;
        let mut g = DVector::zeros(self.dim);
        let mut buf = vec![0.0; self.dim];
        self.gradient_into(w.as_slice(), g.as_mut_slice(), &mut buf);
        let f = self.loss(w.as_slice());
        if !f.is_finite() {
            return Err(Error::NonFinite("global loss".into()));
        }
        let g = WeightVector::from_vector(g).map_err(|_| Error::NonFinite("global gradient".into()))?;
        Ok((f, g))
    }

    pub(crate) fn gradient_into(&self, w: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in &self.clients {
            c.loss.gradient_into(w, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += c.weight * s;
            }
        }
    }

    /// `‖∇F(w)‖²` without allocating beyond two scratch buffers.
    pub fn gradient_norm_sq(&self, w: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim];
        let mut s = vec![0.0; self.dim];
        self.gradient_into(w, &mut g, &mut s);
        g.iter().map(|x| x * x).sum()
    }

    /// `L` and `μ` over `domain`.
    ///
    /// The quadratic part of each gradient coordinate is affine, so its
    /// supremum over the box is attained at a corner and is computed exactly.
    /// The sine ripple adds at most `ε` to every gradient coordinate and to
    /// every Hessian diagonal entry, so for `ε > 0` the result is an upper
    /// bound on the supremum rather than the supremum itself.
    pub fn smoothness_constants(&self, domain: &BoxDomain) -> Result<SmoothnessConstants> {
        domain.validate()?;
        if domain.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: domain.dim() });
        }
        let mut lipschitz = 0.0_f64;
        let mut smoothness = 0.0_f64;
        for c in &self.clients {
            let u = c.loss.hessian();
            let a = c.loss.center();
            let eps = c.loss.amplitude();
            for j in 0..self.dim {
                // extremes of (U(w−a))_j over the box, coordinate by coordinate
                let (mut hi, mut lo) = (0.0, 0.0);
                for l in 0..self.dim {
                    let x = u[(j, l)] * (domain.lower[l] - a[l]);
                    let y = u[(j, l)] * (domain.upper[l] - a[l]);
                    hi += x.max(y);
                    lo += x.min(y);
                }
                let grad_sup = hi.abs().max(lo.abs()) + eps;
                let diag_sup = u[(j, j)].abs() + eps;
                lipschitz = lipschitz.max(grad_sup).max(diag_sup);
            }
            smoothness = smoothness.max(linalg::spectral_norm_sym(u) + eps);
        }
        Ok(SmoothnessConstants { lipschitz, smoothness, domain: domain.clone() })
    }

    /// Checks `⟨∇F(w), w−w*⟩ ≥ τ(F(w) − F(w*))` at every probe, for every
    /// client loss and for the global loss.
    pub fn wqc_check(&self, w_star: &WeightVector, tau: f64, probes: &[WeightVector]) -> Result<WqcReport> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(invalid(format!("tau must be > 0, got {tau}")));
        }
        if probes.is_empty() {
            return Err(invalid("probe set is empty"));
        }
        self.check_dim(w_star.as_slice())?;
        let ws = w_star.as_slice();
        let mut worst = f64::INFINITY;
        let mut worst_probe = 0;
        let mut grad = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        for (p, probe) in probes.iter().enumerate() {
            self.check_dim(probe.as_slice())?;
            let w = probe.as_slice();
            let mut check = |grad: &[f64], f_w: f64, f_star: f64| {
                let inner: f64 = grad.iter().zip(w.iter().zip(ws)).map(|(g, (x, s))| g * (x - s)).sum();
                let rhs = tau * (f_w - f_star);
                // scale-aware slack so that exact equality at w = w* is not flagged
                let slack = 1e-12 * (1.0 + inner.abs() + rhs.abs());
                let margin = inner - rhs + slack;
                if margin < worst {
                    worst = margin;
                    worst_probe = p;
                }
            };
            for c in &self.clients {
                c.loss.gradient_into(w, &mut grad);
                check(&grad, c.loss.value(w), c.loss.value(ws));
            }
            self.gradient_into(w, &mut grad, &mut scratch);
            check(&grad, self.loss(w), self.loss(ws));
        }
        Ok(WqcReport { holds: worst >= 0.0, worst_margin: worst, worst_probe })
    }

    /// Sum of weighted Hessians `Σ p_k U_k`.
    pub fn aggregate_hessian(&self) -> DMatrix<f64> {
        self.clients
            .iter()
            .fold(DMatrix::zeros(self.dim, self.dim), |acc, c| acc + c.loss.hessian() * c.weight)
    }

    /// `a = (Σ p_k U_k)⁻¹ Σ p_k U_k a_k`, the minimizer of an all-quadratic
    /// objective.
    pub fn quadratic_global_minimizer(&self) -> Result<WeightVector> {
        if !self.is_quadratic() {
            return Err(invalid("global minimizer formula requires every client to be quadratic"));
        }
        let h = self.aggregate_hessian();
        let rhs = self
            .clients
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + (c.loss.hessian() * c.loss.center()) * c.weight);
        let eig = linalg::sym_eigen(&h);
        let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let bottom = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if top == 0.0 || bottom <= 1e-12 * top {
            return Err(Error::Singular);
        }
        let a = h.lu().solve(&rhs).ok_or(Error::Singular)?;
        WeightVector::from_vector(a).map_err(|_| Error::Singular)
    }

    /// Local minimizer by gradient descent with Armijo backtracking, for
    /// landscapes without a closed-form minimizer.
    pub fn local_minimizer(&self, start: &WeightVector, tol: f64, max_iter: usize) -> Result<WeightVector> {
        self.check_dim(start.as_slice())?;
        let mut w = start.as_slice().to_vec();
        let mut g = vec![0.0; self.dim];
        let mut scratch = vec![0.0; self.dim];
        let mut trial = vec![0.0; self.dim];
        let mut step = 1.0;
        for _ in 0..max_iter {
            self.gradient_into(&w, &mut g, &mut scratch);
            let gn2: f64 = g.iter().map(|x| x * x).sum();
            if gn2.sqrt() <= tol {
                break;
            }
            let f0 = self.loss(&w);
            step *= 2.0;
            loop {
                for ((t, x), gi) in trial.iter_mut().zip(&w).zip(&g) {
                    *t = x - step * gi;
                }
                if self.loss(&trial) <= f0 - 0.5 * step * gn2 || step < 1e-16 {
                    break;
                }
                step *= 0.5;
            }
            std::mem::swap(&mut w, &mut trial);
        }
        WeightVector::new(w)
    }
}

/// `(1/S − 1/N)·(1/(N−1))·Σᵢ (gᵢ − ḡ)(gᵢ − ḡ)ᵀ` for `N` per-sample gradients
/// and batch size `S`.
pub fn empirical_gradient_covariance(sample_gradients: &[WeightVector], batch_size: usize) -> Result<DMatrix<f64>> {
    let n = sample_gradients.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!("need at least 2 per-sample gradients, got {n}")));
    }
    if batch_size == 0 || batch_size > n {
        return Err(invalid(format!("batch size must lie in [1, {n}], got {batch_size}")));
    }
    let d = sample_gradients[0].dim();
    if let Some(bad) = sample_gradients.iter().find(|g| g.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.dim() });
    }
    let mean = sample_gradients.iter().fold(DVector::zeros(d), |acc, g| acc + g.as_vector()) / n as f64;
    let mut scatter = DMatrix::zeros(d, d);
    for g in sample_gradients {
        let dev = g.as_vector() - &mean;
        scatter += &dev * dev.transpose();
    }
    let prefactor = (1.0 / batch_size as f64 - 1.0 / n as f64) / (n as f64 - 1.0);
    let cov = scatter * prefactor;
    Ok((&cov + cov.transpose()) * 0.5)
}
