use serde::Serialize;

use crate::diffusion::{run_chain, ChainStart, PolicyNet};
use crate::error::{config_err, contract, dim_err, Error, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::DenseArray;

/// Lower clamp for `mu_t` in the posterior-mean map.
pub const MU_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TweedieGrad {
    /// `E[x_0 | x_t = x]` under the pre-trained model.
    pub posterior_mean: Vec<f64>,
    /// Gradient of `r(posterior_mean(x))` with respect to `x`.
    pub grad: Vec<f64>,
    /// `mu_t` fell below [`MU_FLOOR`] and was clamped.
    pub clamped: bool,
}

/// Posterior-mean map `(x - sigma_t eps(x, t)) / mu_t` of the pre-trained
/// model and its Jacobian (`d x d`, row-major), for `t` in `0..=T`.
pub fn tweedie_posterior_mean(policy: &PolicyNet, x: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>, bool)> {
    let d = policy.dim();
    if x.len() != d {
        return Err(dim_err("point dimension"));
    }
    let schedule = policy.schedule();
    let mut jac = vec![0.0; d * d];
    if t == 0 {
        schedule.sigma(0)?;
        for i in 0..d {
            jac[i * d + i] = 1.0;
        }
        return Ok((x.to_vec(), jac, false));
    }
    let raw_mu = schedule.mu(t)?;
    let clamped = raw_mu < MU_FLOOR;
    if clamped {
        log::warn!("mu at step {t} is {raw_mu:e}; clamped to {MU_FLOOR:e} in the posterior-mean map");
    }
    let mu = raw_mu.max(MU_FLOOR);
    let sigma = schedule.sigma(t)?;
    let xa = DenseArray::matrix(1, d, x.to_vec())?;
    let (eps, ej) = policy.pretrained_model().eps_with_jacobian(schedule, &xa, t)?;
    let mean = x.iter().zip(eps.values()).map(|(x, e)| (x - sigma * e) / mu).collect();
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { 1.0 } else { 0.0 };
            jac[i * d + j] = (id - sigma * ej[i * d + j]) / mu;
        }
    }
    Ok((mean, jac, clamped))
}

/// Gradient of the one-point value approximation `v_t(x) ~ r(E[x_0 | x_t = x])`
/// by the chain rule through the posterior-mean map.
pub fn tweedie_value_grad(policy: &PolicyNet, reward: &RewardSpec, x: &[f64], t: usize) -> Result<TweedieGrad> {
    let d = policy.dim();
    let (mean, jac, clamped) = tweedie_posterior_mean(policy, x, t)?;
    let gr = reward.gradient(&mean)?;
    let grad = (0..d).map(|j| (0..d).map(|i| gr[i] * jac[i * d + j]).sum()).collect();
    Ok(TweedieGrad {
        posterior_mean: mean,
        grad,
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathIntegralEstimate {
    /// Estimate of the optimal mean shift `sigma^2(t) grad v_{t-1} / alpha`.
    pub shift: Vec<f64>,
    /// Effective sample size `sum w / max w`.
    pub ess: f64,
    pub degenerate: bool,
}

/// Differentiation-free estimate of the optimal mean shift of step `t`:
/// roll `n` pre-trained continuations from `x` (ignored at `t = T+1`), weight
/// each by `exp(r(x_0)/alpha)` and average the injected first-step noise
/// `sigma(t) e`.
pub fn path_integral_grad(
    policy: &PolicyNet,
    reward: &RewardSpec,
    x: &[f64],
    t: usize,
    alpha: f64,
    n: usize,
    rng: &mut Stream,
) -> Result<PathIntegralEstimate> {
    if !(alpha > 0.0) {
        return Err(contract(format!("path integral needs alpha > 0, got {alpha}")));
    }
    if n < 100 {
        return Err(config_err(format!("path integral needs at least 100 continuations, got {n}")));
    }
    let d = policy.dim();
    if x.len() != d {
        return Err(dim_err("point dimension"));
    }
    let pre = policy.pretrained();
    let schedule = pre.schedule();
    let big_t = schedule.steps();
    if t == 0 || t > big_t + 1 {
        return Err(Error::Index(format!("step {t} outside 1..={}", big_t + 1)));
    }
    let var = schedule.reverse_var(t)?;
    let sd = var.sqrt();
    let start = DenseArray::matrix(n, d, (0..n).flat_map(|_| x.iter().cloned()).collect())?;
    let mean = pre.mean(&start, t)?.mean;
    let noise = DenseArray::matrix(n, d, rng.normals(n * d))?;
    let next = mean.zip_map(&noise, |m, e| m + sd * e)?;
    let terminal = if t == 1 {
        next
    } else {
        let b = run_chain(schedule, ChainStart::At { t: t - 1, x: next }, rng, false, |s, y| pre.mean(y, s))?;
        b.terminal().clone()
    };
    let r = reward.eval_batch(&terminal)?;
    let top = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = r.iter().map(|v| ((v - top) / alpha).exp()).collect();
    let total: f64 = w.iter().sum();
    let ess = total / w.iter().cloned().fold(0.0, f64::max);
    let degenerate = ess < 5.0;
    if degenerate {
        log::warn!("path-integral weights degenerate at step {t}: effective sample size {ess:.2}");
    }
    let shift = (0..d)
        .map(|c| sd * (0..n).map(|i| w[i] * noise.get(i, c)).sum::<f64>() / total)
        .collect();
    Ok(PathIntegralEstimate { shift, ess, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{BaseDistribution, Schedule};
    use crate::rewards::BlackBox;

    fn std_policy() -> PolicyNet {
        PolicyNet::analytic(Schedule::new(8, 2.0).unwrap(), BaseDistribution::standard_normal(1))
    }

    #[test]
    fn gaussian_posterior_mean_exact() {
        let p = std_policy();
        for t in 0..=8 {
            let (mu, sg) = (p.schedule().mu(t).unwrap(), p.schedule().sigma(t).unwrap());
            for x in [-2.0, -0.3, 0.0, 1.7] {
                let (m, j, _) = tweedie_posterior_mean(&p, &[x], t).unwrap();
                let expect = x * mu / (mu * mu + sg * sg);
                assert!((m[0] - expect).abs() < 1e-12);
                assert!((j[0] - mu / (mu * mu + sg * sg)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_reward_gradient_constant() {
        let p = std_policy();
        let r = RewardSpec::linear(vec![2.0]);
        let a = tweedie_value_grad(&p, &r, &[-1.0], 4).unwrap();
        let b = tweedie_value_grad(&p, &r, &[3.0], 4).unwrap();
        assert!((a.grad[0] - b.grad[0]).abs() < 1e-14);
        assert_eq!(tweedie_value_grad(&p, &r, &[0.4], 0).unwrap().grad, vec![2.0]);
    }

    #[test]
    fn zero_reward_path_integral_small() {
        let p = std_policy();
        let n = 400;
        let e = path_integral_grad(&p, &RewardSpec::constant(1, 0.0), &[0.5], 5, 1.0, n, &mut Stream::new(1, 0)).unwrap();
        assert!(e.shift[0].abs() < 3.0 / (n as f64).sqrt());
        assert_eq!(e.ess, n as f64);
    }

    #[test]
    fn black_box_reward_accepted() {
        let p = std_policy();
        let bb = RewardSpec::BlackBox(BlackBox::new("step", 1, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }));
        let e = path_integral_grad(&p, &bb, &[0.0], 3, 1.0, 200, &mut Stream::new(2, 0)).unwrap();
        assert!(e.shift[0].is_finite());
    }

    #[test]
    fn too_few_continuations_rejected() {
        let p = std_policy();
        assert!(path_integral_grad(&p, &RewardSpec::constant(1, 0.0), &[0.0], 3, 1.0, 99, &mut Stream::new(1, 0)).is_err());
    }
}
