use super::{batch_kl, grad_norm, mean, FineTuneConfig, RollIn, StepStats};
use crate::diffusion::{run_chain, ChainStart, PolicyNet, Trajectory, TrajectoryBatch};
use crate::error::{contract, dim_err, Error, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{adam_step, AdamState, DenseArray, Graph, Mlp, Var};

/// Transition log-densities below this are treated as a numeric failure.
const LOG_DENSITY_GUARD: f64 = -1e8;

/// Value network over `[x, t/T, sigma_t]` for steps `1..=T`, plus the
/// log-normalizer `v_{T+1} / alpha` of the initial step.
#[derive(Clone, Debug)]
pub struct PclState {
    pub value: Mlp,
    pub log_normalizer: f64,
    adam: AdamState,
}

impl PclState {
    /// Zero output layer: the value starts at `v = 0`.
    pub fn new(policy: &PolicyNet, config: &FineTuneConfig, rng: &mut Stream) -> Result<Self> {
        let mut widths = vec![policy.dim() + 2];
        widths.extend_from_slice(&config.value_hidden);
        widths.push(1);
        let value = Mlp::zero_output(&widths, config.activation, rng)?;
        let mut blocks = value.params().to_vec();
        blocks.push(DenseArray::scalar(0.0));
        let adam = AdamState::new(&blocks);
        Ok(PclState {
            value,
            log_normalizer: 0.0,
            adam,
        })
    }

    /// `v_t(x)` for `t` in `1..=T`.
    pub fn evaluate(&self, policy: &PolicyNet, x: &DenseArray, t: usize) -> Result<Vec<f64>> {
        let inp = crate::diffusion::with_time(policy.schedule(), x, t);
        Ok(self.value.evaluate(&inp)?.into_values())
    }
}

/// Per-step terms of the consistency identities along a batch: log-ratio
/// `log p_theta - log p_pre` of every transition and the scaled values
/// `v_t(x_t) / alpha`, pinned to `r / alpha` at `t = 0` and to the
/// log-normalizer at `t = T+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTerms {
    /// `log_ratio[t]` for `t = 1..=T+1`; index 0 is empty.
    pub log_ratio: Vec<Vec<f64>>,
    /// `values[t]` for `t = 0..=T+1`.
    pub values: Vec<Vec<f64>>,
}

impl ConsistencyTerms {
    pub fn from_batch(
        policy: &PolicyNet,
        batch: &TrajectoryBatch,
        reward: &RewardSpec,
        alpha: f64,
        log_normalizer: f64,
        value: impl Fn(&DenseArray, usize) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(contract(format!("consistency residuals need alpha > 0, got {alpha}")));
        }
        let big_t = policy.schedule().steps();
        if batch.top != big_t {
            return Err(contract("batch does not start at x_T"));
        }
        let pretrained = policy.pretrained();
        let n = batch.len();
        let mut log_ratio = vec![vec![]];
        for t in 1..=big_t + 1 {
            let var = policy.schedule().reverse_var(t)?;
            if !(var > 0.0) {
                return Err(Error::Config(format!("step {t} has zero variance")));
            }
            let x = &batch.states[t.min(big_t)];
            let next = &batch.states[t - 1];
            let a = policy.mean(x, t)?.mean;
            let b = pretrained.mean(x, t)?.mean;
            let mut row = Vec::with_capacity(n);
            for i in 0..n {
                let lp = crate::diffusion::gaussian_log_density(next.row(i), a.row(i), var)?;
                let lq = crate::diffusion::gaussian_log_density(next.row(i), b.row(i), var)?;
                row.push(lp - lq);
            }
            log_ratio.push(row);
        }
        let mut values = vec![reward.eval_batch(batch.terminal())?.iter().map(|r| r / alpha).collect()];
        for t in 1..=big_t {
            let v = value(&batch.states[t], t)?;
            if v.len() != n {
                return Err(dim_err("value function returned the wrong number of rows"));
            }
            values.push(v.iter().map(|v| v / alpha).collect());
        }
        values.push(vec![log_normalizer; n]);
        Ok(ConsistencyTerms { log_ratio, values })
    }

    pub fn steps(&self) -> usize {
        self.log_ratio.len() - 1
    }

    /// Residuals of every window of `k` consecutive steps ending at
    /// `x_{t-k}`: `values[t] + sum_{s=t-k+1..=t} log_ratio[s] - values[t-k]`,
    /// for `t = k..=T+1`. `k = 1` is the one-step identity; `k = T+1` spans
    /// the whole chain including the initial step.
    pub fn residuals(&self, k: usize) -> Result<Vec<Vec<f64>>> {
        let top = self.steps();
        if k == 0 || k > top {
            return Err(contract(format!("window {k} outside 1..={top}")));
        }
        let n = self.values[0].len();
        Ok((k..=top)
            .map(|t| {
                (0..n)
                    .map(|i| {
                        let lr: f64 = (t + 1 - k..=t).map(|s| self.log_ratio[s][i]).sum();
                        self.values[t][i] + lr - self.values[t - k][i]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Whole-chain residual of one trajectory:
/// `log_normalizer + sum_t (log p_theta - log p_pre) - r(x_0) / alpha`.
/// It vanishes for the soft-optimal policy with the exact normalizer.
pub fn trajectory_balance_residual(
    policy: &PolicyNet,
    log_normalizer: f64,
    trajectory: &Trajectory,
    reward: &RewardSpec,
    alpha: f64,
) -> Result<f64> {
    let big_t = policy.schedule().steps();
    if trajectory.states.len() != big_t + 1 {
        return Err(contract("trajectory length does not match the schedule"));
    }
    let rows: Vec<Vec<f64>> = trajectory.states.clone();
    let states = rows
        .into_iter()
        .map(|r| DenseArray::matrix(1, r.len(), r))
        .collect::<Result<Vec<_>>>()?;
    let batch = TrajectoryBatch {
        top: big_t,
        states,
        steps: vec![],
        clamped_steps: vec![],
        rewards: None,
    };
    let terms = ConsistencyTerms::from_batch(policy, &batch, reward, alpha, log_normalizer, |x, _| {
        Ok(vec![0.0; x.rows()])
    })?;
    Ok(terms.residuals(big_t + 1)?[0][0])
}

/// One simultaneous update of policy and value. Both gradients are taken at
/// the current parameters: the residual's target `v_{t-k}` uses the value
/// network frozen at the start of the iteration, the policy gradient sees
/// the values as constants, and the value gradient sees the policy as fixed.
pub fn pcl_iteration(
    policy: &mut PolicyNet,
    adam: &mut AdamState,
    state: &mut PclState,
    reward: &RewardSpec,
    config: &FineTuneConfig,
    (lr, value_lr): (f64, f64),
    rng: &mut Stream,
) -> Result<StepStats> {
    let alpha = config.alpha;
    if !(alpha > 0.0) {
        return Err(contract(format!("PCL needs alpha > 0, got {alpha}")));
    }
    let big_t = policy.schedule().steps();
    let k = config.window;
    if k == 0 || k > big_t + 1 {
        return Err(contract(format!("window {k} outside 1..={}", big_t + 1)));
    }
    let n = config.batch_size;
    let pretrained = policy.pretrained();
    // one batch serves every step
    let switch = match config.rollin {
        RollIn::Current => 0,
        RollIn::Pretrained => big_t + 1,
        RollIn::Mixture(k) => k.min(big_t + 1),
    };
    let batch = run_chain(
        policy.schedule(),
        ChainStart::Initial { n, dim: policy.dim() },
        rng,
        false,
        |t, x| if t > switch { policy.mean(x, t) } else { pretrained.mean(x, t) },
    )?;
    let rewards = reward.eval_batch(batch.terminal())?;

    let mut g = Graph::new();
    let pvars = policy.bind(&mut g, true);
    let pre_vars = pretrained.bind(&mut g, false);
    let vvars = state.value.bind(&mut g);
    let log_c = g.param(DenseArray::scalar(state.log_normalizer));

    // log-ratio per step, as graph nodes [n, 1]
    let mut log_ratio: Vec<Option<Var>> = vec![None];
    for t in 1..=big_t + 1 {
        let var = policy.schedule().reverse_var(t)?;
        if !(var > 0.0) {
            return Err(Error::Config(format!("step {t} has zero variance")));
        }
        let x = if t > big_t {
            g.constant(DenseArray::zeros(&[n, policy.dim()]))
        } else {
            g.constant(batch.states[t].clone())
        };
        let next = g.constant(batch.states[t - 1].clone());
        let m = policy.mean_graph(&mut g, &pvars, x, t)?;
        let mp = pretrained.mean_graph(&mut g, &pre_vars, x, t)?;
        let lp = g.gaussian_log_density(next, m, var);
        if g.value(lp).values().iter().any(|v| *v < LOG_DENSITY_GUARD) {
            return Err(Error::Numeric(format!("transition log-density below {LOG_DENSITY_GUARD} at step {t}")));
        }
        let lq = g.gaussian_log_density(next, mp, var);
        log_ratio.push(Some(g.sub(lp, lq)));
    }
    // trainable values at the window start, frozen targets at its end
    let zeros = g.constant(DenseArray::zeros(&[n, 1]));
    let current = |g: &mut Graph, t: usize| -> Result<Var> {
        if t == big_t + 1 {
            return Ok(g.add_row(zeros, log_c));
        }
        let inp = g.constant(crate::diffusion::with_time(policy.schedule(), &batch.states[t], t));
        let v = state.value.forward(g, &vvars, inp);
        Ok(g.scale(v, 1.0 / alpha))
    };
    let target = |t: usize| -> Result<DenseArray> {
        if t == 0 {
            return Ok(DenseArray::column(rewards.iter().map(|r| r / alpha).collect()));
        }
        let v = state.evaluate(policy, &batch.states[t], t)?;
        Ok(DenseArray::column(v.iter().map(|v| v / alpha).collect()))
    };
    let mut sq_terms = vec![];
    for t in k..=big_t + 1 {
        let mut r = current(&mut g, t)?;
        for s in t + 1 - k..=t {
            r = g.add(r, log_ratio[s].expect("set"));
        }
        let tv = g.constant(target(t - k)?);
        r = g.sub(r, tv);
        sq_terms.push(g.square(r));
    }
    let mut acc = sq_terms[0];
    for &v in &sq_terms[1..] {
        acc = g.add(acc, v);
    }
    let total = g.sum(acc);
    let loss = g.scale(total, 1.0 / n as f64);

    let policy_vars = pvars.all();
    let mut wrt = policy_vars.clone();
    wrt.extend_from_slice(&vvars);
    wrt.push(log_c);
    let mut grads = g.gradient(loss, &wrt)?;
    let value_grads = grads.split_off(policy_vars.len());
    let loss_value = g.value(loss).item();
    let norm = (grad_norm(&grads).powi(2) + grad_norm(&value_grads).powi(2)).sqrt();
    let kl = mean(&batch_kl(policy, &pretrained, &batch)?);

    super::apply_policy_step(policy, &grads, adam, lr)?;
    let mut blocks = state.value.params().to_vec();
    blocks.push(DenseArray::scalar(state.log_normalizer));
    adam_step(&mut blocks, &value_grads, &mut state.adam, value_lr)?;
    state.log_normalizer = blocks.pop().expect("normalizer block").item();
    for (dst, src) in state.value.params_mut().iter_mut().zip(blocks) {
        *dst = src;
    }
    if !state.log_normalizer.is_finite() || state.value.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite value parameters after update".into()));
    }
    Ok(StepStats {
        mean_reward: mean(&rewards),
        kl_penalty: kl,
        loss: loss_value,
        grad_norm: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_trajectories, BaseDistribution, Schedule};
    use crate::tensor::Activation;

    fn policy(rng: &mut Stream) -> PolicyNet {
        PolicyNet::analytic(Schedule::new(6, 2.0).unwrap(), BaseDistribution::standard_normal(1))
            .with_adapter(&[6], Activation::Tanh, rng)
            .unwrap()
    }

    fn perturbed(rng: &mut Stream) -> PolicyNet {
        let mut p = policy(rng);
        let mut params = p.params();
        for b in params.iter_mut() {
            for v in b.values_mut() {
                *v += 0.2 * rng.normal();
            }
        }
        p.set_params(&params).unwrap();
        p
    }

    #[test]
    fn zero_everything_gives_zero_residual() {
        let mut rng = Stream::new(1, 0);
        let p = policy(&mut rng);
        let b = sample_trajectories(&p, 8, &mut rng).unwrap();
        let terms = ConsistencyTerms::from_batch(&p, &b, &RewardSpec::constant(1, 0.0), 1.0, 0.0, |x, _| {
            Ok(vec![0.0; x.rows()])
        })
        .unwrap();
        for k in 1..=7 {
            for w in terms.residuals(k).unwrap() {
                assert!(w.iter().all(|v| *v == 0.0));
            }
        }
        let tb = trajectory_balance_residual(&p, 0.37, &b.trajectory(0), &RewardSpec::constant(1, 0.0), 1.0).unwrap();
        assert_eq!(tb, 0.37);
    }

    #[test]
    fn one_step_residuals_telescope() {
        let mut rng = Stream::new(2, 0);
        let p = perturbed(&mut rng);
        let b = sample_trajectories(&p, 5, &mut rng).unwrap();
        let terms = ConsistencyTerms::from_batch(&p, &b, &RewardSpec::linear(vec![1.3]), 0.8, -0.2, |x, t| {
            Ok((0..x.rows()).map(|r| (x.get(r, 0) * t as f64).sin()).collect())
        })
        .unwrap();
        let one = terms.residuals(1).unwrap();
        let whole = terms.residuals(7).unwrap();
        assert_eq!(whole.len(), 1);
        for i in 0..5 {
            let s: f64 = one.iter().map(|w| w[i]).sum();
            assert!((s - whole[0][i]).abs() < 1e-10);
        }
        // a length-3 window equals the sum of its three one-step residuals
        let three = terms.residuals(3).unwrap();
        for (w, t) in three.iter().zip(3..=7) {
            for i in 0..5 {
                let s: f64 = (t - 2..=t).map(|u| one[u - 1][i]).sum();
                assert!((s - w[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn window_bounds() {
        let mut rng = Stream::new(3, 0);
        let p = policy(&mut rng);
        let b = sample_trajectories(&p, 2, &mut rng).unwrap();
        let terms =
            ConsistencyTerms::from_batch(&p, &b, &RewardSpec::linear(vec![1.0]), 1.0, 0.0, |x, _| Ok(vec![0.0; x.rows()]))
                .unwrap();
        assert!(matches!(terms.residuals(0), Err(Error::Contract(_))));
        assert!(matches!(terms.residuals(8), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_reward_iteration_is_stationary() {
        let mut rng = Stream::new(4, 0);
        let mut p = policy(&mut rng);
        let cfg = FineTuneConfig {
            batch_size: 16,
            value_hidden: vec![8],
            ..FineTuneConfig::default()
        };
        let mut state = PclState::new(&p, &cfg, &mut rng).unwrap();
        let mut adam = AdamState::new(&p.params());
        let before = p.params();
        let st = pcl_iteration(&mut p, &mut adam, &mut state, &RewardSpec::constant(1, 0.0), &cfg, (1e-2, 1e-2), &mut rng)
            .unwrap();
        assert_eq!(st.loss, 0.0);
        assert_eq!(st.grad_norm, 0.0);
        assert_eq!(p.params(), before);
        assert_eq!(state.log_normalizer, 0.0);
    }
}
