use super::{apply_policy_step, grad_norm, FineTuneConfig, StepStats};
use crate::diffusion::PolicyNet;
use crate::error::Result;
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{AdamState, DenseArray, Graph, Var};

/// Graph of a reparameterized rollout: states are differentiable functions
/// of the policy parameters given the stored noises.
pub(crate) struct Rollout {
    pub vars: Vec<Var>,
    pub terminal: Var,
    /// Per-row path KL `[n, 1]`.
    pub kl: Var,
}

/// Replay the chain from `noises` (generation order, `T+1` first).
pub(crate) fn rollout_graph(g: &mut Graph, policy: &PolicyNet, noises: &[DenseArray]) -> Result<Rollout> {
    let schedule = policy.schedule().clone();
    let big_t = schedule.steps();
    let n = noises[0].rows();
    let pretrained = policy.pretrained();
    let vars = policy.bind(g, true);
    let pre_vars = pretrained.bind(g, false);
    let zeros = g.constant(DenseArray::zeros(&[n, policy.dim()]));
    let mut x = zeros;
    let mut kl_terms = vec![];
    for (k, t) in (1..=big_t + 1).rev().enumerate() {
        let var = schedule.reverse_var(t)?;
        let mean = policy.mean_graph(g, &vars, x, t)?;
        let pre = pretrained.mean_graph(g, &pre_vars, x, t)?;
        if var > 0.0 {
            let gap = g.sub(mean, pre);
            let sq = g.square(gap);
            let rs = g.row_sum(sq);
            kl_terms.push(g.scale(rs, 1.0 / (2.0 * var)));
        }
        let e = g.constant(noises[k].clone());
        let step = g.scale(e, var.sqrt());
        x = g.add(mean, step);
    }
    let mut kl = kl_terms[0];
    for &v in &kl_terms[1..] {
        kl = g.add(kl, v);
    }
    Ok(Rollout {
        vars: vars.all(),
        terminal: x,
        kl,
    })
}

/// One ascent step on `mean_i [r(x_0^i) - alpha * KL_i]` with the chain
/// replayed as a function of the parameters.
pub fn reward_backprop_iteration(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    reward: &RewardSpec,
    config: &FineTuneConfig,
    lr: f64,
    rng: &mut Stream,
) -> Result<StepStats> {
    let n = config.batch_size;
    let d = policy.dim();
    let steps = policy.schedule().steps() + 1;
    let noises: Vec<DenseArray> = (0..steps)
        .map(|_| DenseArray::matrix(n, d, rng.normals(n * d)))
        .collect::<Result<_>>()?;
    let mut g = Graph::new();
    let roll = rollout_graph(&mut g, policy, &noises)?;
    let r = reward.graph(&mut g, roll.terminal)?;
    let pen = g.scale(roll.kl, config.alpha);
    let obj = g.sub(r, pen);
    let total = g.sum(obj);
    let loss = g.scale(total, -1.0 / n as f64);
    let grads = g.gradient(loss, &roll.vars)?;
    let stats = StepStats {
        mean_reward: g.value(r).sum() / n as f64,
        kl_penalty: g.value(roll.kl).sum() / n as f64,
        loss: g.value(loss).item(),
        grad_norm: grad_norm(&grads),
    };
    apply_policy_step(policy, &grads, adam, lr)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{run_chain, BaseDistribution, ChainStart, Schedule};
    use crate::tensor::Activation;

    #[test]
    fn replay_matches_sampler() {
        let mut rng = Stream::new(4, 0);
        let mut p = PolicyNet::analytic(Schedule::new(5, 2.0).unwrap(), BaseDistribution::standard_normal(1))
            .with_adapter(&[4], Activation::Tanh, &mut rng)
            .unwrap();
        let mut params = p.params();
        for b in params.iter_mut() {
            for v in b.values_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        p.set_params(&params).unwrap();
        let b = run_chain(p.schedule(), ChainStart::Initial { n: 3, dim: 1 }, &mut Stream::new(8, 0), false, |t, x| {
            p.mean(x, t)
        })
        .unwrap();
        let noises: Vec<DenseArray> = b.steps.iter().map(|s| s.noise.clone()).collect();
        let mut g = Graph::new();
        let roll = rollout_graph(&mut g, &p, &noises).unwrap();
        for (a, c) in g.value(roll.terminal).values().iter().zip(b.terminal().values()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_gradient_vanishes_at_pretrained() {
        let mut rng = Stream::new(5, 0);
        let p = PolicyNet::analytic(Schedule::new(5, 2.0).unwrap(), BaseDistribution::standard_normal(2))
            .with_adapter(&[4], Activation::Tanh, &mut rng)
            .unwrap();
        let noises: Vec<DenseArray> = (0..6).map(|_| DenseArray::matrix(7, 2, rng.normals(14)).unwrap()).collect();
        let mut g = Graph::new();
        let roll = rollout_graph(&mut g, &p, &noises).unwrap();
        let s = g.sum(roll.kl);
        let grads = g.gradient(s, &roll.vars).unwrap();
        assert!(grads.iter().all(|gr| gr.values().iter().all(|v| *v == 0.0)));
    }
}
