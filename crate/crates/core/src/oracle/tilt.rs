use serde::Serialize;

use crate::error::{contract, dim_err, Result};

/// Isotropic Gaussian reweighted by `exp(a . x / alpha)`. A linear tilt keeps
/// the covariance and moves the mean by `variance * a / alpha`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TiltedGaussian {
    pub base_mean: Vec<f64>,
    pub base_variance: f64,
    pub slope: Vec<f64>,
    pub alpha: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// `alpha = f64::INFINITY` is accepted and leaves the base unchanged.
pub fn tilted_gaussian_target(mean: &[f64], variance: f64, slope: &[f64], alpha: f64) -> Result<TiltedGaussian> {
    if !(alpha > 0.0) {
        return Err(contract(format!("alpha must be positive, got {alpha}")));
    }
    if !(variance > 0.0) {
        return Err(contract(format!("base variance must be positive, got {variance}")));
    }
    if mean.len() != slope.len() {
        return Err(dim_err("mean and slope differ in dimension"));
    }
    let tilted = mean
        .iter()
        .zip(slope)
        .map(|(m, a)| if alpha.is_infinite() { *m } else { m + variance * a / alpha })
        .collect();
    Ok(TiltedGaussian {
        base_mean: mean.to_vec(),
        base_variance: variance,
        slope: slope.to_vec(),
        alpha,
        mean: tilted,
        variance,
    })
}

impl TiltedGaussian {
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        crate::diffusion::gaussian_log_density(x, &self.mean, self.variance)
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }
}
