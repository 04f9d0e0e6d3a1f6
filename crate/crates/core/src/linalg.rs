//! Small dense symmetric-matrix helpers.
//!
//! Every matrix in this crate is at most a few dozen rows, so everything goes
//! through a full symmetric eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below `-PSD_TOLERANCE` mark a matrix as indefinite.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Largest allowed `|m_ij - m_ji|`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn check_square(m: &DMatrix<f64>, dim: usize) -> Result<()> {
    if m.nrows() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: m.nrows() });
    }
    if m.ncols() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: m.ncols() });
    }
    Ok(())
}

pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix".into()));
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigendecomposition of the symmetrized input `(m + mᵀ)/2`.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.min()
}

/// Checks symmetry and `λ_min ≥ -PSD_TOLERANCE`.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(m)?;
    let lo = min_eigenvalue(m);
    if lo < -PSD_TOLERANCE {
        return Err(Error::NotPsd(lo));
    }
    Ok(())
}

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    sym_eigen(m).eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric PSD square root together with the total magnitude of the
/// negative eigenvalues that were clamped to zero.
#[derive(Debug, Clone)]
pub struct PsdRoot {
    pub root: DMatrix<f64>,
    pub clamped: f64,
}

/// `B = Q·diag(√λ)·Qᵀ` so that `B·Bᵀ = V`. Eigenvalues in `[-1e-10, 0)` are
/// clamped to zero, anything more negative is rejected.
pub fn psd_sqrt(v: &DMatrix<f64>) -> Result<PsdRoot> {
    if v.nrows() != v.ncols() {
        return Err(Error::DimensionMismatch { expected: v.nrows(), got: v.ncols() });
    }
    check_symmetric(v)?;
    let eig = sym_eigen(v);
    let mut clamped = 0.0;
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -PSD_TOLERANCE {
            return Err(Error::NotPsd(lambda));
        }
        if lambda < 0.0 {
            clamped += -lambda;
            roots[i] = 0.0;
        } else {
            roots[i] = lambda.sqrt();
        }
    }
    let q = &eig.eigenvectors;
    let root = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok(PsdRoot { root, clamped })
}

/// Elementwise max-abs norm.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `y = m·x` into a caller-owned buffer. `m` is column-major.
#[inline]
pub(crate) fn matvec_into(m: &DMatrix<f64>, x: &[f64], y: &mut [f64]) {
    let n = m.nrows();
    y.iter_mut().for_each(|v| *v = 0.0);
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * n..(j + 1) * n];
        for (yi, &mij) in y.iter_mut().zip(col) {
            *yi += mij * xj;
        }
    }
}
