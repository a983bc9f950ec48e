//! Variance-preserving forward process, Gaussian reverse policies and
//! trajectory sampling.
//!
//! Step indices run `T+1, T, ..., 1`. Step `t` in `1..=T` maps `x_t` to
//! `x_{t-1}`; step `T+1` is the initial distribution of `x_T`.

mod base;
mod policy;
mod pretrain;
mod sample;
mod schedule;

pub use base::BaseDistribution;
pub(crate) use base::log_sum_exp;
pub use policy::{with_time, EpsModel, MeanEval, PolicyNet, PolicyVars};
pub use pretrain::{denoising_loss, pretrain_denoiser, DenoiseBatch, PretrainConfig, PretrainReport};
pub use sample::{
    run_chain, sample_composed, sample_trajectories, ChainStart, Step, Trajectory, TrajectoryBatch,
};
pub use schedule::{forward_perturb, Schedule, SIGMA_FLOOR};

use crate::error::{contract, Result};

/// Log-density of `N(mean, variance I)` at `x`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(contract(format!("variance must be positive, got {variance}")));
    }
    if x.len() != mean.len() {
        return Err(crate::error::dim_err("point and mean differ in dimension"));
    }
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = x.len() as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * variance).ln() - sq / (2.0 * variance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_mean() {
        let v = gaussian_log_density(&[0.0], &[0.0], 1.0).unwrap();
        assert_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln());
    }

    #[test]
    fn translation_invariant() {
        let a = gaussian_log_density(&[0.3, -1.0], &[1.0, 2.0], 0.7).unwrap();
        let b = gaussian_log_density(&[5.3, -3.0], &[6.0, 0.0], 0.7).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn non_positive_variance_rejected() {
        assert!(matches!(
            gaussian_log_density(&[0.0], &[0.0], 0.0),
            Err(crate::Error::Contract(_))
        ));
    }
}
