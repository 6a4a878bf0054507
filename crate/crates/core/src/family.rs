//! Canonical-link exponential families.
//!
//! Every family is parameterised by its cumulant function `b`, with the
//! dispersion fixed at one. Besides `b` and its first four derivatives the
//! module provides the inverse-variance weighted residual
//! `(y - b'(eta)) / b''(eta)` and a closed-form antiderivative of that
//! residual in `eta` (the per-observation term of the modified
//! quasi-likelihood), normalised to vanish at `eta = 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GhiveError, Result};

/// Lower clamp applied to `b''` when forming weighted residuals.
///
/// Poisson variances underflow for very negative linear predictors, and
/// Bernoulli variances do so in both tails.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Beyond this magnitude the Bernoulli derivatives switch to tail forms.
const LOGISTIC_TAIL: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    Gaussian,
    Bernoulli,
    Poisson,
}

/// `b(t)` and its first four derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cumulant {
    pub b: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(GhiveError::Domain(format!("{name} must be finite, got {v}")))
    }
}

impl GlmFamily {
    pub const ALL: [GlmFamily; 3] = [GlmFamily::Gaussian, GlmFamily::Bernoulli, GlmFamily::Poisson];

    pub fn dispersion(self) -> f64 {
        1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            GlmFamily::Gaussian => "gaussian",
            GlmFamily::Bernoulli => "bernoulli",
            GlmFamily::Poisson => "poisson",
        }
    }

    /// `(b, b', b'', b''', b'''')` at `t`.
    pub fn b_derivs(self, t: f64) -> Result<Cumulant> {
        check_finite("linear predictor", t)?;
        Ok(self.cumulant(t))
    }

    pub(crate) fn cumulant(self, t: f64) -> Cumulant {
        match self {
            GlmFamily::Gaussian => Cumulant {
                b: 0.5 * t * t,
                b1: t,
                b2: 1.0,
                b3: 0.0,
                b4: 0.0,
            },
            GlmFamily::Bernoulli => {
                let e = (-t.abs()).exp();
                let b2 = e / ((1.0 + e) * (1.0 + e));
                // 1 - 2 sigmoid(t) without cancellation
                let skew = -(0.5 * t).tanh();
                Cumulant {
                    b: softplus(t),
                    b1: sigmoid(t),
                    b2,
                    b3: b2 * skew,
                    b4: b2 * (1.0 - 6.0 * b2),
                }
            }
            GlmFamily::Poisson => {
                let e = t.exp();
                Cumulant {
                    b: e,
                    b1: e,
                    b2: e,
                    b3: e,
                    b4: e,
                }
            }
        }
    }

    /// Checks that `y` lies in the support of the family.
    pub fn check_response(self, y: f64) -> Result<()> {
        check_finite("response", y)?;
        match self {
            GlmFamily::Gaussian => Ok(()),
            GlmFamily::Bernoulli if y == 0.0 || y == 1.0 => Ok(()),
            GlmFamily::Bernoulli => Err(GhiveError::Domain(format!(
                "bernoulli response must be 0 or 1, got {y}"
            ))),
            GlmFamily::Poisson if y >= 0.0 => Ok(()),
            GlmFamily::Poisson => Err(GhiveError::Domain(format!(
                "poisson response must be non-negative, got {y}"
            ))),
        }
    }

    /// `y - b'(eta)` evaluated without catastrophic cancellation in the
    /// logistic tails.
    fn centered(self, y: f64, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => y - eta,
            GlmFamily::Bernoulli => {
                if eta > 0.0 {
                    (y - 1.0) + sigmoid(-eta)
                } else {
                    y - sigmoid(eta)
                }
            }
            GlmFamily::Poisson => y - eta.exp(),
        }
    }

    /// Inverse-variance weighted residual `(y - b'(eta)) / max(b''(eta), floor)`.
    pub fn weighted_residual(self, y: f64, eta: f64) -> Result<f64> {
        check_finite("response", y)?;
        check_finite("linear predictor", eta)?;
        Ok(self.residual(y, eta))
    }

    pub(crate) fn residual(self, y: f64, eta: f64) -> f64 {
        let b2 = self.cumulant(eta).b2;
        self.centered(y, eta) / b2.max(VARIANCE_FLOOR)
    }

    /// Closed-form `int_0^eta (y - b'(s)) / b''(s) ds`.
    pub fn quasi_loglik_term(self, y: f64, eta: f64) -> Result<f64> {
        check_finite("linear predictor", eta)?;
        self.check_response(y)?;
        Ok(self.quasi_term(y, eta))
    }

    /// Unchecked quasi-likelihood term; Bernoulli responses must be binary.
    pub(crate) fn quasi_term(self, y: f64, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => y * eta - 0.5 * eta * eta,
            GlmFamily::Bernoulli => {
                if y > 0.5 {
                    eta - (-eta).exp() + 1.0
                } else {
                    -eta - eta.exp() + 1.0
                }
            }
            GlmFamily::Poisson => -y * (-eta).exp() - eta + y,
        }
    }

    /// Exact derivative of [`Self::quasi_term`] in `eta`. Agrees with the
    /// weighted residual wherever the variance floor is inactive.
    pub(crate) fn quasi_score(self, y: f64, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => y - eta,
            GlmFamily::Bernoulli => {
                if y > 0.5 {
                    1.0 + (-eta).exp()
                } else {
                    -1.0 - eta.exp()
                }
            }
            GlmFamily::Poisson => y * (-eta).exp() - 1.0,
        }
    }

    /// `1 + zeta(y, eta)`, minus the second derivative of the quasi-likelihood
    /// term, where `zeta = (y - b') b''' / b''^2`.
    pub fn hessian_weight(self, y: f64, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Bernoulli => {
                if y == 1.0 {
                    (-eta).exp()
                } else if y == 0.0 {
                    eta.exp()
                } else {
                    let c = self.cumulant(eta);
                    1.0 + self.centered(y, eta) * c.b3 / (c.b2 * c.b2)
                }
            }
            GlmFamily::Poisson => y * (-eta).exp(),
        }
    }

    pub fn zeta(self, y: f64, eta: f64) -> f64 {
        self.hessian_weight(y, eta) - 1.0
    }

    /// Ordinary log-likelihood term `y eta - b(eta)` (up to a y-only constant).
    pub(crate) fn loglik_term(self, y: f64, eta: f64) -> f64 {
        y * eta - self.cumulant(eta).b
    }

    pub(crate) fn loglik_score(self, y: f64, eta: f64) -> f64 {
        self.centered(y, eta)
    }

    pub(crate) fn variance(self, eta: f64) -> f64 {
        self.cumulant(eta).b2
    }

    /// True when the Bernoulli tail formulas are in effect.
    pub fn in_logistic_tail(eta: f64) -> bool {
        eta.abs() > LOGISTIC_TAIL
    }
}

impl fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GlmFamily {
    type Err = GhiveError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(GlmFamily::Gaussian),
            "bernoulli" | "binomial" | "logistic" => Ok(GlmFamily::Bernoulli),
            "poisson" => Ok(GlmFamily::Poisson),
            other => Err(GhiveError::InvalidInput(format!("unknown family '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn bernoulli_at_zero() {
        let c = GlmFamily::Bernoulli.b_derivs(0.0).unwrap();
        assert_eq!(c.b1, 0.5);
        assert_eq!(c.b2, 0.25);
        assert_eq!(c.b3, 0.0);
        assert!((c.b - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gaussian_is_quadratic() {
        let c = GlmFamily::Gaussian.b_derivs(3.7).unwrap();
        assert_eq!((c.b1, c.b2, c.b3, c.b4), (3.7, 1.0, 0.0, 0.0));
    }

    #[test]
    fn poisson_derivatives_all_equal_exp() {
        let c = GlmFamily::Poisson.b_derivs(1.0).unwrap();
        let e = std::f64::consts::E;
        for v in [c.b, c.b1, c.b2, c.b3, c.b4] {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_predictor_is_rejected() {
        for fam in GlmFamily::ALL {
            assert!(matches!(fam.b_derivs(f64::NAN), Err(GhiveError::Domain(_))));
            assert!(fam.b_derivs(f64::INFINITY).is_err());
            assert!(fam.weighted_residual(0.0, f64::NEG_INFINITY).is_err());
        }
    }

    #[test]
    fn weighted_residual_examples() {
        assert_eq!(GlmFamily::Bernoulli.weighted_residual(1.0, 0.0).unwrap(), 2.0);
        assert_eq!(GlmFamily::Bernoulli.weighted_residual(0.0, 0.0).unwrap(), -2.0);
        let g = GlmFamily::Gaussian.weighted_residual(1.3, 0.3).unwrap();
        assert!((g - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_residual_clamps_vanishing_variance() {
        // b'' = e^-40 is far below the floor
        let r = GlmFamily::Poisson.weighted_residual(1.0, -40.0).unwrap();
        assert!((r - (1.0 - (-40.0f64).exp()) / VARIANCE_FLOOR).abs() < 1e-6);
        let r = GlmFamily::Bernoulli.weighted_residual(1.0, 700.0).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn quasi_term_examples() {
        assert_eq!(GlmFamily::Gaussian.quasi_loglik_term(2.0, 1.0).unwrap(), 1.5);
        assert_eq!(GlmFamily::Bernoulli.quasi_loglik_term(1.0, 0.0).unwrap(), 0.0);
        for fam in GlmFamily::ALL {
            assert_eq!(fam.quasi_loglik_term(1.0, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn bernoulli_quasi_term_rejects_non_binary() {
        assert!(matches!(
            GlmFamily::Bernoulli.quasi_loglik_term(0.5, 1.0),
            Err(GhiveError::Domain(_))
        ));
        assert!(GlmFamily::Poisson.quasi_loglik_term(-1.0, 1.0).is_err());
    }

    #[test]
    fn stable_far_into_the_tails() {
        for t in [-700.0, -100.0, -31.0, 31.0, 100.0, 700.0] {
            let c = GlmFamily::Bernoulli.b_derivs(t).unwrap();
            assert!(c.b.is_finite() && c.b >= 0.0);
            assert!((0.0..=1.0).contains(&c.b1));
            assert!(c.b2 >= 0.0 && c.b2 <= 0.25);
            assert!(c.b3.is_finite() && c.b4.is_finite());
            assert!(GlmFamily::in_logistic_tail(t));
        }
        let c = GlmFamily::Bernoulli.b_derivs(700.0).unwrap();
        assert_eq!(c.b, 700.0);
        let c = GlmFamily::Poisson.b_derivs(700.0).unwrap();
        assert!(c.b.is_finite());
    }

    #[test]
    fn quasi_term_derivative_matches_weighted_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for fam in GlmFamily::ALL {
            for _ in 0..1000 {
                let eta: f64 = rng.random_range(-5.0..5.0);
                let y = match fam {
                    GlmFamily::Gaussian => rng.random_range(-3.0..3.0),
                    GlmFamily::Bernoulli => f64::from(rng.random_bool(0.5) as u8),
                    GlmFamily::Poisson => f64::from(rng.random_range(0u8..8)),
                };
                let fd = (fam.quasi_loglik_term(y, eta + h).unwrap() - fam.quasi_loglik_term(y, eta - h).unwrap())
                    / (2.0 * h);
                let r = fam.weighted_residual(y, eta).unwrap();
                assert!(rel_close(fd, r, 1e-5), "{fam} y={y} eta={eta}: {fd} vs {r}");
                assert!(rel_close(fam.quasi_score(y, eta), r, 1e-12));
            }
        }
    }

    #[test]
    fn derivatives_chain_by_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for fam in GlmFamily::ALL {
            for _ in 0..100 {
                let t: f64 = rng.random_range(-10.0..10.0);
                let lo = fam.b_derivs(t - h).unwrap();
                let hi = fam.b_derivs(t + h).unwrap();
                let c = fam.b_derivs(t).unwrap();
                let d = |a: f64, b: f64| (b - a) / (2.0 * h);
                // absolute slack for values that are themselves near zero
                let ok = |fd: f64, v: f64| (fd - v).abs() <= 1e-5 * v.abs().max(fd.abs()) + 1e-9;
                assert!(ok(d(lo.b, hi.b), c.b1), "{fam} b1 at {t}");
                assert!(ok(d(lo.b1, hi.b1), c.b2), "{fam} b2 at {t}");
                assert!(ok(d(lo.b2, hi.b2), c.b3), "{fam} b3 at {t}");
                assert!(ok(d(lo.b3, hi.b3), c.b4), "{fam} b4 at {t}");
            }
        }
    }

    #[test]
    fn hessian_weight_matches_generic_zeta() {
        for fam in GlmFamily::ALL {
            for &eta in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
                for &y in &[0.0, 1.0] {
                    let c = fam.cumulant(eta);
                    let generic = 1.0 + (y - c.b1) * c.b3 / (c.b2 * c.b2);
                    assert!(rel_close(fam.hessian_weight(y, eta), generic, 1e-10));
                }
            }
        }
    }

    #[test]
    fn bernoulli_mean_monotone_and_bounded() {
        let mut prev = 0.0;
        for i in -2000..=2000 {
            let t = f64::from(i) * 0.01;
            let b1 = GlmFamily::Bernoulli.b_derivs(t).unwrap().b1;
            assert!(b1 > 0.0 && b1 < 1.0);
            assert!(b1 > prev);
            prev = b1;
        }
    }

    #[test]
    fn parse_family_names() {
        assert_eq!("Bernoulli".parse::<GlmFamily>().unwrap(), GlmFamily::Bernoulli);
        assert_eq!("gaussian".parse::<GlmFamily>().unwrap(), GlmFamily::Gaussian);
        assert!("gamma".parse::<GlmFamily>().is_err());
    }
}
