use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, dim_err, Result};
use crate::oracle::{GridMDP, SoftSolution};
use crate::rng::Stream;
use crate::tensor::{adam_step, AdamState, DenseArray};

/// Largest one-step consistency residual over all grid transitions with
/// support under the base kernel and a normal (not underflowed) soft-optimal
/// probability, initial step included:
/// `v_t(i)/alpha + log pi_t(j|i) - v_{t-1}(j)/alpha - log P_t(i, j)`.
pub fn grid_consistency_residual(mdp: &GridMDP, sol: &SoftSolution) -> Result<f64> {
    let n = mdp.len();
    let a = mdp.alpha;
    if sol.values.len() != mdp.steps + 1 || sol.policies.len() != mdp.steps {
        return Err(dim_err("solution does not match the grid"));
    }
    let mut worst: f64 = 0.0;
    for t in 1..=mdp.steps {
        let lp = &mdp.log_transitions[t - 1];
        let pi = &sol.policies[t - 1];
        for i in 0..n {
            for j in 0..n {
                // outside the support, or (sub)normal underflow in the soft-optimal
                // kernel, where ln has lost its precision
                if !lp[i * n + j].is_finite() || !pi[i * n + j].is_normal() {
                    continue;
                }
                let r = sol.values[t][i] / a + pi[i * n + j].ln() - sol.values[t - 1][j] / a - lp[i * n + j];
                worst = worst.max(r.abs());
            }
        }
    }
    let log_c = sol.initial_value / a;
    for i in 0..n {
        if !mdp.log_initial[i].is_finite() || !sol.initial_policy[i].is_normal() {
            continue;
        }
        let r = log_c + sol.initial_policy[i].ln() - sol.values[mdp.steps][i] / a - mdp.log_initial[i];
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Whole-path residual with the normalizer `C` of the solution:
/// `log C + sum log pi - sum log P - r(x_0)/alpha`. `path[t]` is the node
/// index of `x_t`.
pub fn grid_trajectory_balance(mdp: &GridMDP, sol: &SoftSolution, path: &[usize]) -> Result<f64> {
    let n = mdp.len();
    let big_t = mdp.steps;
    if path.len() != big_t + 1 || path.iter().any(|&i| i >= n) {
        return Err(contract("path must visit one grid node per step"));
    }
    let mut r = sol.initial_value / mdp.alpha + sol.initial_policy[path[big_t]].ln() - mdp.log_initial[path[big_t]];
    for t in 1..=big_t {
        let (i, j) = (path[t], path[t - 1]);
        r += sol.policies[t - 1][i * n + j].ln() - mdp.log_transitions[t - 1][i * n + j];
    }
    Ok(r - mdp.reward[path[0]] / mdp.alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMleConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier reached at the last iteration.
    pub lr_decay: f64,
}

impl Default for GridMleConfig {
    fn default() -> Self {
        GridMleConfig {
            iterations: 2000,
            batch_size: 256,
            lr: 0.05,
            lr_decay: 0.01,
        }
    }
}

/// Tabular policy: initial distribution and per-step transition matrices
/// (`policies[t - 1][i * n + j]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub initial: Vec<f64>,
    pub policies: Vec<Vec<f64>>,
}

fn softmax_rows(logits: &DenseArray) -> Vec<f64> {
    let n = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    debug_assert_eq!(out.len(), logits.rows() * n);
    out
}

/// Reward-weighted maximum likelihood on a grid with softmax-tabular
/// policies. Each iteration collects, for every step, paths that follow the
/// current table through `x_t` and the pre-trained kernel afterwards, then
/// takes an Adam step on the weighted cross-entropy.
pub fn grid_weighted_mle(mdp: &GridMDP, config: &GridMleConfig, rng: &mut Stream) -> Result<TabularPolicy> {
    if config.iterations == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(config_err("grid MLE needs iterations, batch size and a positive lr"));
    }
    let n = mdp.len();
    let big_t = mdp.steps;
    let pre: Vec<Vec<f64>> = (1..=big_t).map(|t| mdp.transition(t)).collect();
    let pre_init = mdp.initial();
    // block 0 is the initial step, block t the step t
    let mut logits = vec![DenseArray::matrix(1, n, mdp.log_initial.clone())?];
    for t in 1..=big_t {
        logits.push(DenseArray::matrix(n, n, mdp.log_transitions[t - 1].clone())?);
    }
    let mut adam = AdamState::new(&logits);
    for it in 0..config.iterations {
        let probs: Vec<Vec<f64>> = logits.iter().map(softmax_rows).collect();
        // (block, from-state, to-state, reward)
        let mut samples = Vec::with_capacity(config.batch_size * (big_t + 1));
        for t in (1..=big_t + 1).rev() {
            for _ in 0..config.batch_size {
                // table for steps above t, pre-trained kernel from t down
                let mut x = if t > big_t {
                    rng.categorical(&pre_init)
                } else {
                    rng.categorical(&probs[0])
                };
                let (mut from, mut to) = (0, x);
                for s in (1..=big_t).rev() {
                    let table = if s > t { &probs[s] } else { &pre[s - 1] };
                    let y = rng.categorical(&table[x * n..(x + 1) * n]);
                    if s == t {
                        (from, to) = (x, y);
                    }
                    x = y;
                }
                let block = if t > big_t { 0 } else { t };
                samples.push((block, from, to, mdp.reward[x]));
            }
        }
        let top = samples.iter().map(|s| s.3).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = samples.iter().map(|s| ((s.3 - top) / mdp.alpha).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut grads: Vec<DenseArray> = logits.iter().map(|l| DenseArray::zeros(l.shape())).collect();
        for ((block, from, to, _), w) in samples.iter().zip(&weights) {
            let w = w / total;
            let row = &probs[*block][from * n..(from + 1) * n];
            let g = grads[*block].row_mut(*from);
            for j in 0..n {
                g[j] += w * row[j];
            }
            g[*to] -= w;
        }
        let lr = config.lr * config.lr_decay.powf(it as f64 / config.iterations as f64);
        adam_step(&mut logits, &grads, &mut adam, lr)?;
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(softmax_rows).collect();
    Ok(TabularPolicy {
        initial: probs[0].clone(),
        policies: probs[1..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::grid_soft_solve;

    fn random_grid(rng: &mut Stream, n: usize, steps: usize) -> GridMDP {
        let row = |rng: &mut Stream| {
            let w: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let transitions = (0..steps).map(|_| (0..n).flat_map(|_| row(rng)).collect()).collect();
        let initial = row(rng);
        let reward = (0..n).map(|_| rng.normal()).collect();
        GridMDP::from_parts((0..n).map(|i| i as f64).collect(), transitions, initial, reward, 0.7).unwrap()
    }

    #[test]
    fn optimum_satisfies_consistency() {
        let mut rng = Stream::new(11, 0);
        let mdp = random_grid(&mut rng, 6, 4);
        let sol = grid_soft_solve(&mdp).unwrap();
        assert!(grid_consistency_residual(&mdp, &sol).unwrap() < 1e-10);
        for _ in 0..20 {
            let path: Vec<usize> = (0..=4).map(|_| rng.index(6)).collect();
            assert!(grid_trajectory_balance(&mdp, &sol, &path).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn pretrained_policy_violates_consistency() {
        let mut rng = Stream::new(12, 0);
        let mdp = random_grid(&mut rng, 5, 3);
        let mut sol = grid_soft_solve(&mdp).unwrap();
        sol.policies[1] = mdp.transition(2);
        assert!(grid_consistency_residual(&mdp, &sol).unwrap() > 1e-3);
    }
}
