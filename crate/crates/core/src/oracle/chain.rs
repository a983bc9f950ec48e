use crate::diffusion::{BaseDistribution, Schedule};
use crate::error::{contract, dim_err, Result};

use super::tilt::{tilted_gaussian_target, TiltedGaussian};

/// Closed-form analysis of the pre-trained chain for a single isotropic
/// Gaussian base. Every reverse mean is affine, `rho_t(x) = A_t x + c_t`, so
/// terminal laws and soft values for linear rewards are Gaussian and affine.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineChain {
    pub schedule: Schedule,
    /// `gains[t - 1] = A_t` for steps `1..=T`.
    pub gains: Vec<f64>,
    /// `offsets[t - 1] = c_t`.
    pub offsets: Vec<Vec<f64>>,
    /// Reverse variance of steps `1..=T+1`.
    pub variances: Vec<f64>,
}

impl AffineChain {
    /// Coefficients from the base parameters, independent of any policy code.
    pub fn new(base: &BaseDistribution, schedule: &Schedule) -> Result<Self> {
        if base.components() != 1 {
            return Err(contract("affine chain analysis needs a single-Gaussian base"));
        }
        let m0 = &base.means()[0];
        let v0 = base.variances()[0];
        let dt = schedule.dt();
        let mut gains = vec![];
        let mut offsets = vec![];
        for t in 1..=schedule.steps() {
            let (mu, sg) = (schedule.mu(t)?, schedule.sigma(t)?);
            let v = mu * mu * v0 + sg * sg;
            // eps / sigma = (x - mu m0) / v, before any flooring of sigma
            gains.push(1.0 + 0.5 * dt - dt / v);
            offsets.push(m0.iter().map(|m| dt * mu * m / v).collect());
        }
        let variances = (1..=schedule.steps() + 1)
            .map(|t| schedule.reverse_var(t))
            .collect::<Result<_>>()?;
        Ok(AffineChain {
            schedule: schedule.clone(),
            gains,
            offsets,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.offsets.first().map_or(0, |o| o.len())
    }

    fn steps(&self) -> usize {
        self.gains.len()
    }

    /// Reverse mean of step `t` in `1..=T`.
    pub fn mean(&self, x: &[f64], t: usize) -> Vec<f64> {
        let a = self.gains[t - 1];
        x.iter().zip(&self.offsets[t - 1]).map(|(x, c)| a * x + c).collect()
    }

    /// Gaussian law of `x_0` under the chain started at `N(0, I)`:
    /// mean vector and (isotropic) variance.
    pub fn terminal(&self) -> (Vec<f64>, f64) {
        let mut m = vec![0.0; self.dim()];
        let mut s2 = self.variances[self.steps()];
        for t in (1..=self.steps()).rev() {
            m = self.mean(&m, t);
            s2 = self.gains[t - 1].powi(2) * s2 + self.variances[t - 1];
        }
        (m, s2)
    }

    /// Tilt of the chain's terminal law by `exp(a . x / alpha)`.
    pub fn tilted_target(&self, slope: &[f64], alpha: f64) -> Result<TiltedGaussian> {
        let (m, s2) = self.terminal();
        tilted_gaussian_target(&m, s2, slope, alpha)
    }

    /// Slopes `b_t` of the soft values `v_t(x) = b_t . x + k_t` for the
    /// linear reward `r(x) = a . x`, `t = 0..=T`. The slope does not depend
    /// on `alpha`.
    pub fn value_slopes(&self, slope: &[f64]) -> Result<Vec<Vec<f64>>> {
        if slope.len() != self.dim() {
            return Err(dim_err("slope dimension"));
        }
        let mut out = vec![slope.to_vec()];
        for t in 1..=self.steps() {
            let a = self.gains[t - 1];
            out.push(out[t - 1].iter().map(|b| a * b).collect());
        }
        Ok(out)
    }

    /// Offsets `k_t` of the soft values, `t = 0..=T+1` (the last entry is the
    /// scalar `v_{T+1} = alpha log C`).
    pub fn value_offsets(&self, slope: &[f64], alpha: f64) -> Result<Vec<f64>> {
        if !(alpha > 0.0) {
            return Err(contract("alpha must be positive"));
        }
        let b = self.value_slopes(slope)?;
        let mut k = vec![0.0];
        for t in 1..=self.steps() {
            let bc: f64 = b[t - 1].iter().zip(&self.offsets[t - 1]).map(|(b, c)| b * c).sum();
            let bb: f64 = b[t - 1].iter().map(|v| v * v).sum();
            k.push(k[t - 1] + bc + bb * self.variances[t - 1] / (2.0 * alpha));
        }
        let bb: f64 = b[self.steps()].iter().map(|v| v * v).sum();
        k.push(k[self.steps()] + bb * self.variances[self.steps()] / (2.0 * alpha));
        Ok(k)
    }

    /// Exact soft value `v_t(x)` for `t` in `0..=T`.
    pub fn value(&self, slope: &[f64], alpha: f64, x: &[f64], t: usize) -> Result<f64> {
        let b = &self.value_slopes(slope)?[t];
        let k = self.value_offsets(slope, alpha)?[t];
        Ok(k + b.iter().zip(x).map(|(b, x)| b * x).sum::<f64>())
    }

    /// Mean shift of the soft-optimal policy at step `t` in `1..=T+1`:
    /// `sigma^2(t) b_{t-1} / alpha`.
    pub fn optimal_shift(&self, slope: &[f64], alpha: f64, t: usize) -> Result<Vec<f64>> {
        let b = self.value_slopes(slope)?;
        let v = self.variances[t - 1];
        Ok(b[t - 1].iter().map(|b| v * b / alpha).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_chain_stays_near_unit_variance() {
        let s = Schedule::new(32, 4.0).unwrap();
        let c = AffineChain::new(&BaseDistribution::standard_normal(1), &s).unwrap();
        let (m, v) = c.terminal();
        assert_eq!(m, vec![0.0]);
        // stationary variance of x <- (1 - dt/2) x + sqrt(dt) e is 1 / (1 - dt/4)
        assert!((v - 1.0 / (1.0 - 0.125 / 4.0)).abs() < 1e-3);
    }

    #[test]
    fn slopes_multiply_gains() {
        let s = Schedule::new(4, 1.0).unwrap();
        let c = AffineChain::new(&BaseDistribution::standard_normal(1), &s).unwrap();
        let b = c.value_slopes(&[2.0]).unwrap();
        assert_eq!(b[0], vec![2.0]);
        assert!((b[4][0] - 2.0 * c.gains.iter().product::<f64>()).abs() < 1e-15);
    }
}
