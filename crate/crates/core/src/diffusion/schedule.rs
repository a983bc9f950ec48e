use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Smallest perturbation scale used as a divisor in the reverse mean.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Discretization of the forward SDE `dx = -0.5 x dt + dw` on `T` steps of
/// width `horizon / T`. Moment tables are indexed `0..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    horizon: f64,
    dt: f64,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    reverse_var: Vec<f64>,
}

impl Schedule {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("schedule needs at least one step"));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(config_err(format!("horizon must be positive, got {horizon}")));
        }
        let dt = horizon / steps as f64;
        let mu = (0..=steps).map(|t| (-0.5 * t as f64 * dt).exp()).collect();
        let sigma = (0..=steps)
            .map(|t| (-(-(t as f64) * dt).exp_m1()).sqrt())
            .collect();
        Ok(Schedule {
            steps,
            horizon,
            dt,
            mu,
            sigma,
            reverse_var: vec![dt; steps],
        })
    }

    /// Replace the reverse-step variance of steps `1..=T` (ablations). Zero
    /// gives a deterministic chain with undefined transition densities.
    pub fn with_reverse_variance(mut self, var: f64) -> Result<Self> {
        if !(var >= 0.0) || !var.is_finite() {
            return Err(config_err(format!("reverse variance must be >= 0, got {var}")));
        }
        self.reverse_var = vec![var; self.steps];
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Index(format!("step {t} outside 0..={}", self.steps)));
        }
        Ok(())
    }

    /// Continuous time of index `t`.
    pub fn time(&self, t: usize) -> f64 {
        t as f64 * self.dt
    }

    pub fn mu(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.mu[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.sigma[t])
    }

    /// `sigma(t)` clamped below at [`SIGMA_FLOOR`], plus whether it was clamped.
    pub fn sigma_floored(&self, t: usize) -> Result<(f64, bool)> {
        let s = self.sigma(t)?;
        Ok(if s < SIGMA_FLOOR { (SIGMA_FLOOR, true) } else { (s, false) })
    }

    /// Variance of reverse step `t` in `1..=T+1`; the initial step has unit variance.
    pub fn reverse_var(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps + 1 {
            return Err(Error::Index(format!("reverse step {t} outside 1..={}", self.steps + 1)));
        }
        Ok(if t == self.steps + 1 { 1.0 } else { self.reverse_var[t - 1] })
    }

    /// True when every reverse step has positive variance.
    pub fn has_densities(&self) -> bool {
        self.reverse_var.iter().all(|v| *v > 0.0)
    }

    /// Network time encoding `(t/T, sigma_t)`.
    pub fn time_features(&self, t: usize) -> [f64; 2] {
        let t = t.min(self.steps);
        [t as f64 / self.steps as f64, self.sigma[t]]
    }
}

/// `x_t = mu_t x_0 + sigma_t noise`.
pub fn forward_perturb(schedule: &Schedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    let (m, s) = (schedule.mu(t)?, schedule.sigma(t)?);
    if x0.len() != noise.len() {
        return Err(crate::error::dim_err("point and noise differ in dimension"));
    }
    Ok(x0.iter().zip(noise).map(|(x, e)| m * x + s * e).collect())
}
