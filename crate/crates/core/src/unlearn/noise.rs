//! Gaussian mechanism calibration.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::SmoothnessConstants;
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = Self { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// `2 M L^2 m^2 / (lambda^3 n^2)`.
pub fn sensitivity(constants: &SmoothnessConstants, m: usize, n: usize) -> Result<f64> {
    let SmoothnessConstants { lambda, lipschitz, hessian_lipschitz, .. } = *constants;
    if !(lambda > 0.0 && lipschitz > 0.0 && hessian_lipschitz > 0.0) {
        return Err(invalid(format!(
            "sensitivity needs positive constants (lambda {lambda}, L {lipschitz}, M {hessian_lipschitz})"
        )));
    }
    if m == 0 {
        return Ok(0.0);
    }
    if n <= m {
        return Err(invalid(format!("sensitivity needs n > m, got n = {n}, m = {m}")));
    }
    let (m, n) = (m as f64, n as f64);
    Ok(2.0 * hessian_lipschitz * lipschitz.powi(2) * m.powi(2) / (lambda.powi(3) * n.powi(2)))
}

/// `(delta_f / epsilon) sqrt(2 ln(1.25 / delta))`.
pub fn noise_scale(delta_f: f64, budget: &PrivacyBudget) -> f64 {
    delta_f / budget.epsilon * (2.0 * (1.25 / budget.delta).ln()).sqrt()
}

/// `delta + nu` with `nu ~ N(0, sigma^2 I)` drawn from the seed.
pub fn perturb(delta: &DVector<f64>, sigma: f64, noise_seed: u64) -> DVector<f64> {
    if sigma == 0.0 {
        return delta.clone();
    }
    let mut rng = rng::stream(noise_seed, Domain::Noise, 0, 0);
    delta.map(|v| v + sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
}
