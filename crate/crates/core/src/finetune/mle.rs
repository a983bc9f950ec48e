use super::{apply_policy_step, batch_kl, grad_norm, mean, FineTuneConfig, StepStats};
use crate::diffusion::{sample_composed, PolicyNet};
use crate::error::{contract, Error, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{AdamState, DenseArray, Graph};

/// Max-shifted exponential weights `exp((r - max r) / alpha)`.
pub fn mle_weights(rewards: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(contract(format!("weighted MLE needs alpha > 0, got {alpha}")));
    }
    let top = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Degenerate("no finite rewards in the batch".into()));
    }
    let w: Vec<f64> = rewards.iter().map(|r| ((r - top) / alpha).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("all weights vanish after normalization".into()));
    }
    Ok(w)
}

/// For each step `t` draw a fresh batch that follows the roll-in policy
/// through `x_t` and the pre-trained policy afterwards, weight every
/// transition `x_t -> x_{t-1}` by the exponentiated terminal reward, and take
/// one step on the weighted Gaussian negative log-likelihood.
pub fn reward_weighted_mle_iteration(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    reward: &RewardSpec,
    config: &FineTuneConfig,
    lr: f64,
    rng: &mut Stream,
) -> Result<StepStats> {
    if !(config.alpha > 0.0) {
        return Err(contract(format!("weighted MLE needs alpha > 0, got {}", config.alpha)));
    }
    let pretrained = policy.pretrained();
    let big_t = policy.schedule().steps();
    let n = config.batch_size;
    let mut collected = Vec::with_capacity(big_t + 1);
    let mut all_rewards = Vec::with_capacity(n * (big_t + 1));
    for t in (1..=big_t + 1).rev() {
        let switch = config.rollin.switch(t, big_t + 1);
        let batch = sample_composed(policy, &pretrained, switch, n, rng)?;
        let rewards = reward.eval_batch(batch.terminal())?;
        all_rewards.extend_from_slice(&rewards);
        collected.push((t, batch));
    }
    let weights = mle_weights(&all_rewards, config.alpha)?;
    let total_w: f64 = weights.iter().sum();

    let mut g = Graph::new();
    let vars = policy.bind(&mut g, true);
    let mut terms = vec![];
    for (k, (t, batch)) in collected.iter().enumerate() {
        let var = policy.schedule().reverse_var(*t)?;
        if !(var > 0.0) {
            return Err(Error::Config(format!("step {t} has zero variance")));
        }
        let x = if *t > big_t {
            DenseArray::zeros(&[n, policy.dim()])
        } else {
            batch.states[*t].clone()
        };
        let xv = g.constant(x);
        let next = g.constant(batch.states[*t - 1].clone());
        let m = policy.mean_graph(&mut g, &vars, xv, *t)?;
        let gap = g.sub(next, m);
        let sq = g.square(gap);
        let rs = g.row_sum(sq);
        let w = g.constant(DenseArray::column(
            weights[k * n..(k + 1) * n].iter().map(|w| w / (2.0 * var * total_w)).collect(),
        ));
        terms.push(g.mul(rs, w));
    }
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = g.add(acc, v);
    }
    let loss = g.sum(acc);
    let grads = g.gradient(loss, &vars.all())?;
    let loss_value = g.value(loss).item();
    let norm = grad_norm(&grads);

    // Reward and KL of on-policy samples from the last collected batch (the
    // current policy through x_1 when rolling in with it).
    let on_policy = &collected.last().expect("T >= 1").1;
    let kl = mean(&batch_kl(policy, &pretrained, on_policy)?);
    let stats = StepStats {
        mean_reward: mean(&all_rewards[all_rewards.len() - n..]),
        kl_penalty: kl,
        loss: loss_value,
        grad_norm: norm,
    };
    apply_policy_step(policy, &grads, adam, lr)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_invariant_to_reward_offset() {
        let r = vec![0.375, -1.25, 2.5, 0.0, 1.125];
        let a = mle_weights(&r, 0.7).unwrap();
        let shifted: Vec<f64> = r.iter().map(|v| v + 1024.0).collect();
        let b = mle_weights(&shifted, 0.7).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn small_alpha_does_not_overflow() {
        let w = mle_weights(&[1000.0, 999.0, 0.0], 1e-3).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn alpha_zero_rejected() {
        assert!(matches!(mle_weights(&[1.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_rewards_degenerate() {
        assert!(matches!(mle_weights(&[f64::NAN], 1.0), Err(Error::Degenerate(_))));
    }
}
