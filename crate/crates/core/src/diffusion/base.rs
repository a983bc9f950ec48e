use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::Stream;

/// Mixture of isotropic Gaussians in `R^d`, used as the data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseDistribution {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl BaseDistribution {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(config_err("mixture needs matching weights, means and variances"));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(dim_err("mixture means must share a positive dimension"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(config_err("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(config_err("component variances must be positive"));
        }
        Ok(BaseDistribution {
            weights,
            means,
            variances,
        })
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Marginal of `mu x_0 + sigma noise` with `x_0` drawn from this mixture.
    pub fn noised(&self, mu: f64, sigma: f64) -> Self {
        BaseDistribution {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|v| mu * v).collect()).collect(),
            variances: self.variances.iter().map(|v| mu * mu * v + sigma * sigma).collect(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(dim_err(format!("point of dimension {} for a {}-d mixture", x.len(), self.dim())));
        }
        Ok(())
    }

    fn component_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - sq / (2.0 * v)
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(log_sum_exp(&self.component_terms(x)))
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density(x)?.exp())
    }

    /// Log posterior probability of each component given `x`.
    pub fn log_responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let terms = self.component_terms(x);
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::Numeric("mixture density underflow".into()));
        }
        Ok(terms.iter().map(|t| t - lse).collect())
    }

    /// Score `grad log p(x)` and, row-major, its `d x d` Jacobian.
    pub fn score_with_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let resp: Vec<f64> = self.log_responsibilities(x)?.iter().map(|l| l.exp()).collect();
        let mut score = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        for ((r, m), v) in resp.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            let s: Vec<f64> = x.iter().zip(m).map(|(a, b)| -(a - b) / v).collect();
            for i in 0..d {
                score[i] += r * s[i];
                jac[i * d + i] -= r / v;
                for j in 0..d {
                    jac[i * d + j] += r * s[i] * s[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                jac[i * d + j] -= score[i] * score[j];
            }
        }
        Ok((score, jac))
    }

    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.score_with_jacobian(x)?.0)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Per-coordinate variance of the mixture.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut out = vec![0.0; self.dim()];
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for (i, o) in out.iter_mut().enumerate() {
                *o += w * (v + (m[i] - mean[i]).powi(2));
            }
        }
        out
    }

    /// `n` draws as rows of a flat row-major buffer.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let k = rng.categorical(&self.weights);
            let s = self.variances[k].sqrt();
            for j in 0..d {
                out.push(self.means[k][j] + s * rng.normal());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_weights() {
        assert!(BaseDistribution::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(BaseDistribution::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let b = BaseDistribution::new(vec![0.3, 0.7], vec![vec![-2.0], vec![1.5]], vec![0.5, 1.2]).unwrap();
        let h = 1e-3;
        let total: f64 = (-20_000..=20_000)
            .map(|i| b.density(&[i as f64 * h]).unwrap() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn score_matches_finite_difference() {
        let b = BaseDistribution::new(
            vec![0.4, 0.6],
            vec![vec![-1.0, 0.5], vec![2.0, -0.5]],
            vec![0.8, 1.5],
        )
        .unwrap();
        let x = [0.3, 0.1];
        let (s, j) = b.score_with_jacobian(&x).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (b.log_density(&xp).unwrap() - b.log_density(&xm).unwrap()) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-8);
            let (sp, _) = b.score_with_jacobian(&xp).unwrap();
            let (sm, _) = b.score_with_jacobian(&xm).unwrap();
            for k in 0..2 {
                let fd = (sp[k] - sm[k]) / (2.0 * h);
                assert!((fd - j[k * 2 + i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn moments_of_symmetric_mixture() {
        let b = BaseDistribution::new(vec![0.5, 0.5], vec![vec![-3.0], vec![3.0]], vec![1.0, 1.0]).unwrap();
        assert_eq!(b.mean(), vec![0.0]);
        assert_eq!(b.variance(), vec![10.0]);
    }
}
