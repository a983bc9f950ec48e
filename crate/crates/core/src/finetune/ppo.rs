use super::{apply_policy_step, grad_norm, mean, FineTuneConfig, StepStats};
use crate::diffusion::{sample_trajectories, PolicyNet};
use crate::error::{contract, Error, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{AdamState, DenseArray, Graph, Var};

/// Transitions collected from the snapshot policy, step by step.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    /// `(t, x_t, x_{t-1}, snapshot log-density, variance)`
    /// for `t = T+1..=1`; `x_t` is a zero batch at `t = T+1`.
    pub steps: Vec<PpoStep>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PpoStep {
    pub t: usize,
    pub x: DenseArray,
    pub next: DenseArray,
    pub old_log_density: Vec<f64>,
    pub variance: f64,
}

impl PpoBatch {
    pub fn collect(snapshot: &PolicyNet, reward: &RewardSpec, n: usize, rng: &mut Stream) -> Result<Self> {
        let batch = sample_trajectories(snapshot, n, rng)?;
        let big_t = snapshot.schedule().steps();
        let rewards = reward.eval_batch(batch.terminal())?;
        let mut steps = Vec::with_capacity(big_t + 1);
        for s in &batch.steps {
            if !(s.variance > 0.0) {
                return Err(Error::Config(format!("step {} has zero variance; ratios undefined", s.t)));
            }
            let x = if s.t > big_t {
                DenseArray::zeros(&[n, snapshot.dim()])
            } else {
                batch.states[s.t].clone()
            };
            steps.push(PpoStep {
                t: s.t,
                next: batch.states[s.t - 1].clone(),
                x,
                old_log_density: s.log_density.clone(),
                variance: s.variance,
            });
        }
        Ok(PpoBatch { steps, rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Surrogate values on a stored batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surrogate {
    pub clipped: f64,
    pub unclipped: f64,
    /// Largest `|ratio - 1|` seen.
    pub max_ratio_deviation: f64,
    /// Mean per-trajectory KL of the policy against the pre-trained means.
    pub kl: f64,
}

struct Terms {
    clipped: Var,
    unclipped: Var,
    kl: Var,
    max_dev: f64,
}

/// Per-step signal `c_t = -r(x_0) + alpha * KL_t(theta)` multiplies the
/// likelihood ratio; the loss takes the larger of the clipped and unclipped
/// products, the pessimistic side for a minimized objective.
fn build(g: &mut Graph, policy: &PolicyNet, trainable: bool, batch: &PpoBatch, alpha: f64, clip: f64) -> Result<(Terms, Vec<Var>)> {
    let n = batch.len();
    if n == 0 {
        return Err(contract("PPO surrogate of an empty batch"));
    }
    let vars = policy.bind(g, trainable);
    // The pre-trained means go through the same graph ops as the policy's,
    // so a fresh adapter gives an exactly zero gap and gradient.
    let pretrained = policy.pretrained();
    let pre_vars = pretrained.bind(g, false);
    let neg_r = g.constant(DenseArray::column(batch.rewards.iter().map(|r| -r).collect()));
    let mut clipped_terms = vec![];
    let mut unclipped_terms = vec![];
    let mut kl_terms = vec![];
    let mut max_dev: f64 = 0.0;
    for s in &batch.steps {
        let x = g.constant(s.x.clone());
        let next = g.constant(s.next.clone());
        let mean_v = policy.mean_graph(g, &vars, x, s.t)?;
        let logp = g.gaussian_log_density(next, mean_v, s.variance);
        let old = g.constant(DenseArray::column(s.old_log_density.clone()));
        let diff = g.sub(logp, old);
        let ratio = g.exp(diff);
        for r in g.value(ratio).values() {
            if !r.is_finite() {
                return Err(Error::Numeric(format!("non-finite likelihood ratio at step {}", s.t)));
            }
            max_dev = max_dev.max((r - 1.0).abs());
        }
        let pre = pretrained.mean_graph(g, &pre_vars, x, s.t)?;
        let gap = g.sub(mean_v, pre);
        let sq = g.square(gap);
        let rs = g.row_sum(sq);
        let kl = g.scale(rs, 1.0 / (2.0 * s.variance));
        let weighted_kl = g.scale(kl, alpha);
        let signal = g.add(neg_r, weighted_kl);
        let plain = g.mul(signal, ratio);
        let clamped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
        let cl = g.mul(signal, clamped);
        let worst = g.maximum(plain, cl);
        unclipped_terms.push(plain);
        clipped_terms.push(worst);
        kl_terms.push(kl);
    }
    let reduce = |g: &mut Graph, terms: &[Var]| {
        let mut acc = terms[0];
        for &v in &terms[1..] {
            acc = g.add(acc, v);
        }
        let s = g.sum(acc);
        g.scale(s, 1.0 / n as f64)
    };
    let clipped = reduce(g, &clipped_terms);
    let unclipped = reduce(g, &unclipped_terms);
    let kl = reduce(g, &kl_terms);
    Ok((
        Terms {
            clipped,
            unclipped,
            kl,
            max_dev,
        },
        vars.all(),
    ))
}

/// Evaluate the clipped and unclipped surrogates of `policy` on a batch
/// collected from a snapshot.
pub fn ppo_surrogate(policy: &PolicyNet, batch: &PpoBatch, alpha: f64, clip: f64) -> Result<Surrogate> {
    let mut g = Graph::new();
    let (terms, _) = build(&mut g, policy, false, batch, alpha, clip)?;
    g.check()?;
    Ok(Surrogate {
        clipped: g.value(terms.clipped).item(),
        unclipped: g.value(terms.unclipped).item(),
        max_ratio_deviation: terms.max_dev,
        kl: g.value(terms.kl).item(),
    })
}

/// Collect a batch from the current parameters (the snapshot), then take
/// `inner_epochs` Adam steps on the clipped surrogate. The reward is only
/// evaluated, never differentiated.
pub fn ppo_iteration(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    reward: &RewardSpec,
    config: &FineTuneConfig,
    lr: f64,
    rng: &mut Stream,
) -> Result<StepStats> {
    let batch = PpoBatch::collect(policy, reward, config.batch_size, rng)?;
    let mut first = None;
    for _ in 0..config.inner_epochs {
        let mut g = Graph::new();
        let (terms, vars) = build(&mut g, policy, true, &batch, config.alpha, config.clip)?;
        let grads = g.gradient(terms.clipped, &vars)?;
        let norm = grad_norm(&grads);
        if first.is_none() {
            first = Some((g.value(terms.clipped).item(), g.value(terms.kl).item(), norm));
        }
        apply_policy_step(policy, &grads, adam, lr)?;
    }
    let (loss, kl, norm) = first.expect("at least one epoch");
    Ok(StepStats {
        mean_reward: mean(&batch.rewards),
        kl_penalty: kl,
        loss,
        grad_norm: norm,
    })
}
