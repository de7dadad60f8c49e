//! Mean-squared error of a convex mixture of two biased, correlated
//! similarity estimators, and the mixing weight that minimizes it.
//!
//! With `Sim_E = Sim* + b_E + e_E`, `Sim_H = Sim* + b_H + e_H`,
//! `Var e_E = s_E^2`, `Var e_H = s_H^2`, `Corr(e_E, e_H) = rho`:
//!
//! ```text
//! f(a) = ((1-a) b_E + a b_H)^2 + (1-a)^2 s_E^2 + a^2 s_H^2 + 2a(1-a) rho s_E s_H
//!      = A a^2 + 2 B a + C
//! A = (b_H - b_E)^2 + s_E^2 + s_H^2 - 2 rho s_E s_H
//! B = -[ s_E^2 - rho s_E s_H + b_E (b_E - b_H) ]
//! C = b_E^2 + s_E^2
//! a* = -B / A,   f(a*) = C - B^2 / A
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Below this the quadratic coefficient is treated as zero.
pub const DEGENERATE_A: f64 = 1e-14;

pub const MIN_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureErrorModel {
    pub b_e: f64,
    pub b_h: f64,
    pub sigma_e: f64,
    pub sigma_h: f64,
    pub rho: f64,
}

impl MixtureErrorModel {
    pub fn new(b_e: f64, b_h: f64, sigma_e: f64, sigma_h: f64, rho: f64) -> Result<Self> {
        if ![b_e, b_h, sigma_e, sigma_h, rho].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("error model parameters must be finite"));
        }
        if sigma_e < 0.0 || sigma_h < 0.0 {
            return Err(Error::domain("standard deviations must be nonnegative"));
        }
        if !(-1.0..=1.0).contains(&rho) {
            return Err(Error::domain(format!("correlation {rho} outside [-1, 1]")));
        }
        Ok(Self {
            b_e,
            b_h,
            sigma_e,
            sigma_h,
            rho,
        })
    }

    /// Natural magnitude of the MSE values, used to scale tolerances.
    pub fn scale(&self) -> f64 {
        self.b_e * self.b_e + self.b_h * self.b_h + self.sigma_e * self.sigma_e + self.sigma_h * self.sigma_h
    }
}

pub fn mse_of_mix(alpha: f64, m: &MixtureErrorModel) -> f64 {
    let bias = (1.0 - alpha) * m.b_e + alpha * m.b_h;
    let cross = 2.0 * alpha * (1.0 - alpha) * m.rho * m.sigma_e * m.sigma_h;
    bias * bias
        + (1.0 - alpha).powi(2) * m.sigma_e * m.sigma_e
        + alpha * alpha * m.sigma_h * m.sigma_h
        + cross
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl QuadraticCoeffs {
    pub fn eval(&self, alpha: f64) -> f64 {
        self.a * alpha * alpha + 2.0 * self.b * alpha + self.c
    }
}

pub fn quadratic_coeffs(m: &MixtureErrorModel) -> QuadraticCoeffs {
    let d = m.b_h - m.b_e;
    let cov = m.rho * m.sigma_e * m.sigma_h;
    QuadraticCoeffs {
        a: d * d + m.sigma_h * m.sigma_h + m.sigma_e * m.sigma_e - 2.0 * cov,
        b: -(m.sigma_e * m.sigma_e - cov + m.b_e * (m.b_e - m.b_h)),
        c: m.b_e * m.b_e + m.sigma_e * m.sigma_e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimalAlpha {
    /// The minimizer; it may fall outside `[0, 1]`, which is reported
    /// rather than clamped.
    Value(f64),
    /// `A <= 1e-14`: the MSE is affine (or constant) in alpha.
    Degenerate,
}

impl OptimalAlpha {
    pub fn value(self) -> Option<f64> {
        match self {
            OptimalAlpha::Value(a) => Some(a),
            OptimalAlpha::Degenerate => None,
        }
    }

    pub fn in_open_unit_interval(self) -> bool {
        matches!(self, OptimalAlpha::Value(a) if a > 0.0 && a < 1.0)
    }
}

pub fn optimal_alpha(m: &MixtureErrorModel) -> OptimalAlpha {
    let q = quadratic_coeffs(m);
    if q.a <= DEGENERATE_A {
        return OptimalAlpha::Degenerate;
    }
    let numer = m.sigma_e * m.sigma_e - m.rho * m.sigma_e * m.sigma_h + m.b_e * (m.b_e - m.b_h);
    OptimalAlpha::Value(numer / q.a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Monte-Carlo MSE of the mixture under jointly Gaussian errors.
///
/// Mean and variance are accumulated with Welford's update so a constant
/// sample stream reproduces its value exactly.
pub fn monte_carlo_mse(alpha: f64, m: &MixtureErrorModel, n: usize, seed: u64) -> Result<McEstimate> {
    if n < MIN_MC_SAMPLES {
        return Err(Error::domain(format!("Monte-Carlo needs at least {MIN_MC_SAMPLES} samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orth = (1.0 - m.rho * m.rho).max(0.0).sqrt();
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 1..=n {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let eps_e = m.sigma_e * z1;
        let eps_h = m.sigma_h * (m.rho * z1 + orth * z2);
        let err = (1.0 - alpha) * (m.b_e + eps_e) + alpha * (m.b_h + eps_h);
        let x = err * err;
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetric() -> MixtureErrorModel {
        MixtureErrorModel::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap()
    }

    fn skewed() -> MixtureErrorModel {
        MixtureErrorModel::new(0.5, -0.5, 1.0, 2.0, 0.3).unwrap()
    }

    #[test]
    fn mse_examples() {
        let m = skewed();
        assert_eq!(mse_of_mix(0.0, &m), 0.25 + 1.0);
        assert_eq!(mse_of_mix(0.5, &symmetric()), 0.5);
        // hand expansion at alpha = 0.25: bias 0.25, 0.5625*1 + 0.0625*4 + 2*0.1875*0.3*2
        let want = 0.0625 + 0.5625 + 0.25 + 0.225;
        assert!((mse_of_mix(0.25, &m) - want).abs() < 1e-15);
    }

    #[test]
    fn coefficient_examples() {
        let q = quadratic_coeffs(&symmetric());
        assert_eq!((q.a, q.b, q.c), (2.0, -1.0, 1.0));
        let degenerate = MixtureErrorModel::new(0.3, 0.3, 1.5, 1.5, 1.0).unwrap();
        assert_eq!(quadratic_coeffs(&degenerate).a, 0.0);
        let m = skewed();
        let q = quadratic_coeffs(&m);
        for k in 0..=20 {
            let a = -0.5 + 0.1 * k as f64;
            assert!((q.eval(a) - mse_of_mix(a, &m)).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_alpha_examples() {
        assert_eq!(optimal_alpha(&symmetric()), OptimalAlpha::Value(0.5));
        let degenerate = MixtureErrorModel::new(0.3, 0.3, 1.5, 1.5, 1.0).unwrap();
        assert_eq!(optimal_alpha(&degenerate), OptimalAlpha::Degenerate);
        let m = skewed();
        let a = optimal_alpha(&m).value().unwrap();
        assert!(a > 0.0 && a < 1.0);
        assert!(mse_of_mix(a, &m) < mse_of_mix(0.0, &m).min(mse_of_mix(1.0, &m)));
    }

    #[test]
    fn optimal_alpha_can_leave_unit_interval() {
        // strongly correlated noisier hyperbolic branch: the optimum
        // extrapolates past the Euclidean endpoint
        let m = MixtureErrorModel::new(0.0, 0.0, 1.0, 2.0, 0.9).unwrap();
        let a = optimal_alpha(&m).value().unwrap();
        assert!(a < 0.0);
        assert!(!optimal_alpha(&m).in_open_unit_interval());
    }

    #[test]
    fn monte_carlo_deterministic_errors() {
        let m = MixtureErrorModel::new(0.7, -0.2, 0.0, 0.0, 0.4).unwrap();
        let r = monte_carlo_mse(0.3, &m, 10_000, 1).unwrap();
        let bias = 0.7 * 0.7 + 0.3 * -0.2;
        assert_eq!(r.estimate, bias * bias);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn monte_carlo_rejects_small_n() {
        assert!(monte_carlo_mse(0.5, &symmetric(), 100, 0).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(MixtureErrorModel::new(0.0, 0.0, -1.0, 1.0, 0.0).is_err());
        assert!(MixtureErrorModel::new(0.0, 0.0, 1.0, 1.0, 1.5).is_err());
        assert!(MixtureErrorModel::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
    }
}
