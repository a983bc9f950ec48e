use serde::{Deserialize, Serialize};

use super::{ValueMethod, ValueModel};
use crate::diffusion::{sample_trajectories, with_time, PolicyNet};
use crate::error::{config_err, contract, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{adam_step, Activation, AdamState, DenseArray, Graph, Mlp};

/// Shifted exponents are capped here so a badly initialized model cannot
/// overflow the regression targets.
const MAX_EXPONENT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueFitConfig {
    /// Pre-trained trajectories rolled for the regression data.
    pub trajectories: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Gradient steps (Monte Carlo) or gradient steps per sweep (soft Q).
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Soft Q: backward-regression sweeps; at least `T+1` are needed for
    /// the reward to reach every step. 0 means `3(T+1)/2`, which leaves
    /// room for the shared network to settle at the top steps.
    pub sweeps: usize,
    /// Soft Q: kernel draws per state for the inner expectation.
    pub inner_draws: usize,
}

impl Default for ValueFitConfig {
    fn default() -> Self {
        ValueFitConfig {
            trajectories: 4000,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            iterations: 8000,
            batch_size: 512,
            lr: 5e-3,
            lr_decay: 0.05,
            sweeps: 0,
            inner_draws: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    /// Loss of the last gradient step of every sweep (one entry for Monte Carlo).
    pub final_losses: Vec<f64>,
    pub samples: usize,
}

fn check(alpha: f64, config: &ValueFitConfig) -> Result<()> {
    if !(alpha > 0.0) {
        return Err(contract(format!("value fitting needs alpha > 0, got {alpha}")));
    }
    if config.trajectories < 100 {
        return Err(config_err(format!("value fitting needs at least 100 trajectories, got {}", config.trajectories)));
    }
    if config.iterations == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(config_err("value fitting needs iterations, batch size and a positive lr"));
    }
    if !(config.lr_decay > 0.0 && config.lr_decay <= 1.0) {
        return Err(config_err("lr_decay must lie in (0, 1]"));
    }
    Ok(())
}

fn fresh_net(dim: usize, config: &ValueFitConfig, offset: f64, rng: &mut Stream) -> Result<Mlp> {
    let mut widths = vec![dim + 2];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let mut net = Mlp::zero_output(&widths, config.activation, rng)?;
    let last = net.params().len() - 1;
    net.params_mut()[last] = DenseArray::scalar(offset);
    Ok(net)
}

/// Regress `h` onto log-targets `L` in the exponential domain: minimize
/// `(exp((h - c)/alpha) - exp((L - c)/alpha))^2` with the shift `c` set to
/// the detached prediction of each row. The shift depends on the input only,
/// so the minimizer is still `alpha log E[exp(L/alpha) | input]`, while both
/// terms stay of order one wherever the model is roughly right.
fn fit_exp_domain(
    net: &mut Mlp,
    inputs: &DenseArray,
    log_targets: &[f64],
    alpha: f64,
    config: &ValueFitConfig,
    rng: &mut Stream,
) -> Result<f64> {
    let rows = inputs.rows();
    let cols = inputs.cols();
    let mut adam = AdamState::new(net.params());
    let mut last = f64::NAN;
    let m = config.batch_size.min(rows);
    for it in 0..config.iterations {
        let idx: Vec<usize> = (0..m).map(|_| rng.index(rows)).collect();
        let mut x = DenseArray::zeros(&[m, cols]);
        for (r, &i) in idx.iter().enumerate() {
            x.row_mut(r).copy_from_slice(inputs.row(i));
        }
        let mut g = Graph::new();
        let p = net.bind(&mut g);
        let xv = g.constant(x);
        let h = net.forward(&mut g, &p, xv);
        let shift = g.value(h).clone();
        let target = DenseArray::column(
            idx.iter()
                .zip(shift.values())
                .map(|(&i, c)| ((log_targets[i] - c) / alpha).min(MAX_EXPONENT).exp())
                .collect(),
        );
        let c = g.constant(shift);
        let d = g.sub(h, c);
        let z = g.scale(d, 1.0 / alpha);
        let u = g.exp(z);
        let tv = g.constant(target);
        let e = g.sub(u, tv);
        let sq = g.square(e);
        let loss = g.mean(sq);
        let grads = g.gradient(loss, &p)?;
        last = g.value(loss).item();
        let lr = config.lr * config.lr_decay.powf(it as f64 / config.iterations as f64);
        adam_step(net.params_mut(), &grads, &mut adam, lr)?;
    }
    Ok(last)
}

/// Fit `v_t(x) = alpha log E[exp(r(x_0)/alpha) | x_t = x]` by regression on
/// pre-trained rollouts, all steps `t = 0..=T` jointly.
pub fn fit_value_mc(
    pretrained: &PolicyNet,
    reward: &RewardSpec,
    alpha: f64,
    config: &ValueFitConfig,
    rng: &mut Stream,
) -> Result<(ValueModel, FitReport)> {
    check(alpha, config)?;
    let pre = pretrained.pretrained();
    let schedule = pre.schedule().clone();
    let big_t = schedule.steps();
    let d = pre.dim();
    let mut roll = rng.split(1);
    let batch = sample_trajectories(&pre, config.trajectories, &mut roll)?;
    let rewards = reward.eval_batch(batch.terminal())?;
    let n = batch.len();
    let mut inputs = DenseArray::zeros(&[n * (big_t + 1), d + 2]);
    let mut targets = Vec::with_capacity(n * (big_t + 1));
    for t in 0..=big_t {
        let inp = with_time(&schedule, &batch.states[t], t);
        for i in 0..n {
            inputs.row_mut(t * n + i).copy_from_slice(inp.row(i));
            targets.push(rewards[i]);
        }
    }
    let mean_r = rewards.iter().sum::<f64>() / n as f64;
    let mut init = rng.split(2);
    let mut net = fresh_net(d, config, mean_r, &mut init)?;
    let mut fit_rng = rng.split(3);
    let loss = fit_exp_domain(&mut net, &inputs, &targets, alpha, config, &mut fit_rng)?;
    Ok((
        ValueModel::new(net, ValueMethod::MonteCarlo, schedule)?,
        FitReport {
            final_losses: vec![loss],
            samples: inputs.rows(),
        },
    ))
}

/// Soft backup of one state: `alpha log sum_j p_j exp(v_j / alpha)`,
/// computed stably.
pub fn soft_backup(probabilities: &[f64], next_values: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(contract(format!("soft backup needs alpha > 0, got {alpha}")));
    }
    if probabilities.len() != next_values.len() {
        return Err(crate::error::dim_err("probabilities and values differ in length"));
    }
    let terms: Vec<f64> = probabilities
        .iter()
        .zip(next_values)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, v)| p.ln() + v / alpha)
        .collect();
    Ok(alpha * crate::diffusion::log_sum_exp(&terms))
}

/// Backward regression `v_t <- alpha log E_pre[exp(v_{t-1}/alpha) | x_t]`
/// with `v_0 = r`. Each sweep freezes a copy of the network, estimates the
/// inner expectation with `inner_draws` kernel samples per state, and refits.
pub fn fit_value_softq(
    pretrained: &PolicyNet,
    reward: &RewardSpec,
    alpha: f64,
    config: &ValueFitConfig,
    rng: &mut Stream,
) -> Result<(ValueModel, FitReport)> {
    check(alpha, config)?;
    if config.inner_draws < 2 {
        return Err(config_err(format!("soft Q needs at least 2 inner draws, got {}", config.inner_draws)));
    }
    let pre = pretrained.pretrained();
    let schedule = pre.schedule().clone();
    let big_t = schedule.steps();
    let d = pre.dim();
    let sweeps = if config.sweeps == 0 { 3 * (big_t + 1) / 2 } else { config.sweeps };
    let mut roll = rng.split(1);
    let batch = sample_trajectories(&pre, config.trajectories, &mut roll)?;
    let n = batch.len();
    let k = config.inner_draws;

    // states x_t for t = 0..=T; row t*n + i
    let mut inputs = DenseArray::zeros(&[n * (big_t + 1), d + 2]);
    for t in 0..=big_t {
        let inp = with_time(&schedule, &batch.states[t], t);
        for i in 0..n {
            inputs.row_mut(t * n + i).copy_from_slice(inp.row(i));
        }
    }
    let terminal_r = reward.eval_batch(batch.terminal())?;
    // kernel draws x' = rho_pre(x_t) + sigma(t) e for t = 1..=T, fixed across sweeps
    let mut draw_rng = rng.split(4);
    let mut draws: Vec<DenseArray> = vec![DenseArray::zeros(&[0, d])];
    let mut draw_rewards: Vec<Vec<f64>> = vec![vec![]];
    for t in 1..=big_t {
        let mean = pre.mean(&batch.states[t], t)?.mean;
        let sd = schedule.reverse_var(t)?.sqrt();
        let mut xs = DenseArray::zeros(&[n * k, d]);
        for i in 0..n {
            for j in 0..k {
                let row = xs.row_mut(i * k + j);
                for c in 0..d {
                    row[c] = mean.get(i, c) + sd * draw_rng.normal();
                }
            }
        }
        draw_rewards.push(if t == 1 { reward.eval_batch(&xs)? } else { vec![] });
        draws.push(xs);
    }

    let mean_r = terminal_r.iter().sum::<f64>() / n as f64;
    let mut init = rng.split(2);
    let mut net = fresh_net(d, config, mean_r, &mut init)?;
    let mut fit_rng = rng.split(3);
    let mut final_losses = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        let frozen = net.clone();
        let mut targets = Vec::with_capacity(n * (big_t + 1));
        targets.extend_from_slice(&terminal_r);
        for t in 1..=big_t {
            let next = if t == 1 {
                draw_rewards[1].clone()
            } else {
                frozen.evaluate(&with_time(&schedule, &draws[t], t - 1))?.into_values()
            };
            for i in 0..n {
                let terms: Vec<f64> = next[i * k..(i + 1) * k].iter().map(|v| v / alpha).collect();
                let lse = crate::diffusion::log_sum_exp(&terms) - (k as f64).ln();
                targets.push(alpha * lse);
            }
        }
        let loss = fit_exp_domain(&mut net, &inputs, &targets, alpha, config, &mut fit_rng)?;
        final_losses.push(loss);
    }
    Ok((
        ValueModel::new(net, ValueMethod::SoftQ, schedule)?,
        FitReport {
            final_losses,
            samples: inputs.rows(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_state_backup_is_log_three_halves() {
        // uniform kernel, rewards (0, ln 2), alpha = 1
        let v = soft_backup(&[0.5, 0.5], &[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((v - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backup_scales_with_alpha() {
        let v = soft_backup(&[0.25, 0.75], &[2.0, 2.0], 0.3).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_small_budgets() {
        let p = PolicyNet::analytic(
            crate::diffusion::Schedule::new(4, 1.0).unwrap(),
            crate::diffusion::BaseDistribution::standard_normal(1),
        );
        let cfg = ValueFitConfig {
            trajectories: 50,
            ..Default::default()
        };
        assert!(fit_value_mc(&p, &RewardSpec::linear(vec![1.0]), 1.0, &cfg, &mut Stream::new(1, 0)).is_err());
        let cfg = ValueFitConfig {
            inner_draws: 1,
            ..Default::default()
        };
        assert!(matches!(
            fit_value_softq(&p, &RewardSpec::linear(vec![1.0]), 1.0, &cfg, &mut Stream::new(1, 0)),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            fit_value_mc(&p, &RewardSpec::linear(vec![1.0]), 0.0, &ValueFitConfig::default(), &mut Stream::new(1, 0)),
            Err(crate::Error::Contract(_))
        ));
    }
}
