use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalaConfig {
    /// Number of draws returned after burn-in.
    pub samples: usize,
    /// Langevin step `h`: proposal `x + (h/2) grad log pi(x) + sqrt(h) noise`.
    pub step: f64,
    /// Apply the Metropolis-Hastings correction.
    pub correction: bool,
}

#[derive(Clone, Debug)]
pub struct MalaResult {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub burn_in: usize,
    pub chain_length: usize,
    /// Acceptance fell below 5%.
    pub poorly_tuned: bool,
}

fn proposal_log_density(to: &[f64], from: &[f64], grad_from: &[f64], h: f64) -> f64 {
    let sq: f64 = to
        .iter()
        .zip(from)
        .zip(grad_from)
        .map(|((y, x), g)| {
            let d = y - x - 0.5 * h * g;
            d * d
        })
        .sum();
    -sq / (2.0 * h)
}

/// Metropolis-adjusted Langevin chain. `log_density` returns the
/// (unnormalized) log-density and its gradient. Burn-in is 10% of the chain
/// length, no thinning.
pub fn mala_sample(
    log_density: impl Fn(&[f64]) -> (f64, Vec<f64>),
    start: &[f64],
    config: &MalaConfig,
    rng: &mut Stream,
) -> Result<MalaResult> {
    if !(config.step > 0.0) {
        return Err(config_err(format!("MALA step must be positive, got {}", config.step)));
    }
    if config.samples == 0 {
        return Err(config_err("MALA needs at least one sample"));
    }
    let chain_length = (config.samples as f64 / 0.9).ceil() as usize;
    let burn_in = chain_length - config.samples;
    let h = config.step;
    let sd = h.sqrt();
    let d = start.len();
    let mut x = start.to_vec();
    let (mut lp, mut grad) = log_density(&x);
    if !lp.is_finite() {
        return Err(Error::Numeric("MALA start has zero density".into()));
    }
    let mut accepted = 0usize;
    let mut samples = Vec::with_capacity(config.samples);
    for it in 0..chain_length {
        let y: Vec<f64> = (0..d).map(|i| x[i] + 0.5 * h * grad[i] + sd * rng.normal()).collect();
        let (lp_y, grad_y) = log_density(&y);
        let accept = if !config.correction {
            lp_y.is_finite()
        } else if lp_y.is_finite() {
            let log_ratio = lp_y - lp + proposal_log_density(&x, &y, &grad_y, h)
                - proposal_log_density(&y, &x, &grad, h);
            rng.uniform().ln() < log_ratio
        } else {
            false
        };
        if accept {
            x = y;
            lp = lp_y;
            grad = grad_y;
            accepted += 1;
        }
        if it >= burn_in {
            samples.push(x.clone());
        }
    }
    let acceptance_rate = accepted as f64 / chain_length as f64;
    let poorly_tuned = acceptance_rate < 0.05;
    if poorly_tuned {
        log::warn!("MALA acceptance rate {acceptance_rate:.3} is below 0.05; reduce the step");
    }
    Ok(MalaResult {
        samples,
        acceptance_rate,
        burn_in,
        chain_length,
        poorly_tuned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burn_in_is_tenth_of_chain() {
        let cfg = MalaConfig {
            samples: 900,
            step: 0.5,
            correction: true,
        };
        let r = mala_sample(|x| (-0.5 * x[0] * x[0], vec![-x[0]]), &[0.0], &cfg, &mut Stream::new(1, 0)).unwrap();
        assert_eq!(r.chain_length, 1000);
        assert_eq!(r.burn_in, 100);
        assert_eq!(r.samples.len(), 900);
    }

    #[test]
    fn huge_step_flags_poor_tuning() {
        let cfg = MalaConfig {
            samples: 2000,
            step: 400.0,
            correction: true,
        };
        let r = mala_sample(|x| (-0.5 * x[0] * x[0], vec![-x[0]]), &[0.0], &cfg, &mut Stream::new(1, 0)).unwrap();
        assert!(r.poorly_tuned);
    }

    #[test]
    fn rejects_non_positive_step() {
        let cfg = MalaConfig {
            samples: 10,
            step: 0.0,
            correction: true,
        };
        assert!(mala_sample(|x| (-x[0] * x[0], vec![-2.0 * x[0]]), &[0.0], &cfg, &mut Stream::new(1, 0)).is_err());
    }
}
