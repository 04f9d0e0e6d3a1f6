//! Learning-rate schedules `η(t)` in continuous time, with the closed-form
//! integrals `φ(t) = ∫₀ᵗ η` and `∫₀ᵗ η²` that the bounds and the time sampler
//! need.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// `η(t) = c`
    Constant { value: f64 },
    /// `η(t) = 1/(t+1)^b`
    PowerDecay { exponent: f64 },
    /// `η(t) = 1/√(t+1)`
    InverseSqrt,
}

impl Schedule {
    pub fn constant(value: f64) -> Result<Self> {
        let s = Self::Constant { value };
        s.validate()?;
        Ok(s)
    }

    pub fn power_decay(exponent: f64) -> Result<Self> {
        let s = Self::PowerDecay { exponent };
        s.validate()?;
        Ok(s)
    }

    /// `η(t) = 1/(t+1)`
    pub fn harmonic() -> Self {
        Self::PowerDecay { exponent: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Constant { value } if !(value.is_finite() && value > 0.0) => {
                Err(invalid(format!("constant schedule must be > 0, got {value}")))
            }
            Self::PowerDecay { exponent } if !(exponent.is_finite() && exponent >= 0.0) => {
                Err(invalid(format!("power-decay exponent must be finite and >= 0, got {exponent}")))
            }
            _ => Ok(()),
        }
    }

    fn exponent(&self) -> Option<f64> {
        match *self {
            Self::Constant { .. } => None,
            Self::PowerDecay { exponent } => Some(exponent),
            Self::InverseSqrt => Some(0.5),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            _ => (t + 1.0).powf(-self.exponent().unwrap_or(0.0)),
        }
    }

    /// `φ(t) = ∫₀ᵗ η(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { value } => value * t,
            _ => power_integral(self.exponent().unwrap_or(0.0), t),
        }
    }

    /// `∫₀ᵗ η(s)² ds`.
    pub fn integral_of_square(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { value } => value * value * t,
            _ => power_integral(2.0 * self.exponent().unwrap_or(0.0), t),
        }
    }

    /// The `s ∈ [0, t]` with `φ(s) = u·φ(t)`.
    pub fn inverse_integral_fraction(&self, horizon: f64, u: f64) -> f64 {
        match *self {
            Self::Constant { .. } => u * horizon,
            _ => {
                let b = self.exponent().unwrap_or(0.0);
                if (b - 1.0).abs() < 1e-12 {
                    (1.0 + horizon).powf(u) - 1.0
                } else {
                    let target = u * power_integral(b, horizon);
                    ((1.0 - b) * target + 1.0).powf(1.0 / (1.0 - b)) - 1.0
                }
            }
        }
    }
}

/// `∫₀ᵗ (s+1)^{-b} ds`.
fn power_integral(b: f64, t: f64) -> f64 {
    if (b - 1.0).abs() < 1e-12 {
        t.ln_1p()
    } else {
        let e = 1.0 - b;
        // ((t+1)^e − 1)/e, written to stay accurate for small e·ln(1+t)
        (e * t.ln_1p()).exp_m1() / e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn harmonic_integral_at_e_minus_one() {
        assert!((Schedule::harmonic().integral(E - 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_integral() {
        let s = Schedule::constant(0.3).unwrap();
        assert!((s.integral(7.0) - 2.1).abs() < 1e-15);
        assert!((s.integral_of_square(7.0) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn inverse_sqrt_integral_at_three() {
        // 2·√4 − 2
        assert!((Schedule::InverseSqrt.integral(3.0) - 2.0).abs() < 1e-15);
        assert!((Schedule::InverseSqrt.integral_of_square(3.0) - 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn power_decay_matches_inverse_sqrt() {
        let p = Schedule::power_decay(0.5).unwrap();
        for t in [0.0, 0.3, 10.0, 1e4] {
            assert!((p.integral(t) - Schedule::InverseSqrt.integral(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn harmonic_square_integral() {
        // ∫ 1/(s+1)² = t/(t+1)
        let t = 9.0;
        assert!((Schedule::harmonic().integral_of_square(t) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn inverse_fraction_median_of_harmonic() {
        let s = Schedule::harmonic();
        let median = s.inverse_integral_fraction(E - 1.0, 0.5);
        assert!((median - (E.sqrt() - 1.0)).abs() < 1e-15);
        assert!((median - 0.6487).abs() < 1e-4);
    }

    #[test]
    fn inverse_fraction_inverts_integral() {
        for s in [Schedule::harmonic(), Schedule::InverseSqrt, Schedule::power_decay(0.3).unwrap(), Schedule::power_decay(1.7).unwrap(), Schedule::constant(2.0).unwrap()] {
            let t = 12.5;
            for u in [0.0, 0.1, 0.5, 0.9, 1.0] {
                let x = s.inverse_integral_fraction(t, u);
                assert!((s.integral(x) - u * s.integral(t)).abs() < 1e-12, "{s:?} u={u}");
            }
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(Schedule::constant(0.0).is_err());
        assert!(Schedule::constant(-1.0).is_err());
        assert!(Schedule::power_decay(-0.5).is_err());
        assert!(Schedule::power_decay(f64::NAN).is_err());
    }

    #[test]
    fn serde_tagging() {
        let s: Schedule = serde_json::from_str(r#"{"kind":"power-decay","exponent":1.0}"#).unwrap();
        assert_eq!(s, Schedule::harmonic());
        let s: Schedule = serde_json::from_str(r#"{"kind":"inverse-sqrt"}"#).unwrap();
        assert_eq!(s, Schedule::InverseSqrt);
    }
}
