use serde::{Deserialize, Serialize};

use crate::diffusion::PolicyNet;
use crate::error::{config_err, contract, dim_err, Error, Result};
use crate::rewards::RewardSpec;
use crate::tensor::DenseArray;

fn lse(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Uniform 1D grid `[lo, hi]` with `n` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn nodes(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.lo + h * i as f64).collect()
    }
}

/// Finite-state version of the reverse chain. `log_transitions[t - 1]` holds
/// `log P_t[i][j] = log p(x_{t-1} = node j | x_t = node i)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMDP {
    pub nodes: Vec<f64>,
    pub steps: usize,
    pub log_transitions: Vec<Vec<f64>>,
    /// Log-probabilities of `x_T` (the initial step `T+1`).
    pub log_initial: Vec<f64>,
    pub reward: Vec<f64>,
    pub alpha: f64,
}

fn normalize_log(row: &mut [f64]) {
    let z = lse(row.iter().cloned());
    for v in row.iter_mut() {
        *v -= z;
    }
}

/// Gaussian kernel row over the nodes, trapezoid weighted, in log space.
fn kernel_row(nodes: &[f64], log_w: &[f64], mean: f64, var: f64) -> Vec<f64> {
    let mut row = vec![f64::NEG_INFINITY; nodes.len()];
    if var > 0.0 {
        for (j, x) in nodes.iter().enumerate() {
            row[j] = log_w[j] - (x - mean).powi(2) / (2.0 * var);
        }
    } else {
        let nearest = nodes
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - mean).abs().total_cmp(&(b.1 - mean).abs()))
            .map(|(j, _)| j)
            .unwrap();
        row[nearest] = 0.0;
    }
    normalize_log(&mut row);
    row
}

impl GridMDP {
    /// Assemble from explicit probabilities; rows must sum to 1.
    pub fn from_parts(
        nodes: Vec<f64>,
        transitions: Vec<Vec<f64>>,
        initial: Vec<f64>,
        reward: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(config_err("grid needs at least two states"));
        }
        if !(alpha > 0.0) {
            return Err(contract(format!("alpha must be positive, got {alpha}")));
        }
        if reward.len() != n || initial.len() != n || transitions.iter().any(|p| p.len() != n * n) {
            return Err(dim_err("grid parts disagree in size"));
        }
        let check_row = |row: &[f64]| -> Result<()> {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(contract("negative transition probability"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(contract("transition row does not sum to 1"));
            }
            Ok(())
        };
        check_row(&initial)?;
        for p in &transitions {
            for row in p.chunks(n) {
                check_row(row)?;
            }
        }
        Ok(GridMDP {
            nodes,
            steps: transitions.len(),
            log_transitions: transitions.iter().map(|p| p.iter().map(|v| v.ln()).collect()).collect(),
            log_initial: initial.iter().map(|v| v.ln()).collect(),
            reward,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `P_t` as probabilities, `t` in `1..=T`.
    pub fn transition(&self, t: usize) -> Vec<f64> {
        self.log_transitions[t - 1].iter().map(|v| v.exp()).collect()
    }

    pub fn initial(&self) -> Vec<f64> {
        self.log_initial.iter().map(|v| v.exp()).collect()
    }

    /// Marginals `p_t` of the pre-trained chain for `t = 0..=T`.
    pub fn pretrained_marginals(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut out = vec![vec![0.0; n]; self.steps + 1];
        out[self.steps] = self.initial();
        for t in (1..=self.steps).rev() {
            let p = self.transition(t);
            let mut next = vec![0.0; n];
            for i in 0..n {
                let w = out[t][i];
                if w == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[j] += w * p[i * n + j];
                }
            }
            out[t - 1] = next;
        }
        out
    }
}

/// Project a 1D policy and reward onto a grid.
pub fn grid_build(policy: &PolicyNet, spec: &GridSpec, reward: &RewardSpec, alpha: f64) -> Result<GridMDP> {
    if policy.dim() != 1 {
        return Err(dim_err("grid oracle supports 1D policies only"));
    }
    if spec.n < 11 {
        return Err(config_err(format!("grid needs at least 11 nodes, got {}", spec.n)));
    }
    if !(spec.hi > spec.lo) {
        return Err(config_err("grid upper bound must exceed lower bound"));
    }
    if !(alpha > 0.0) {
        return Err(contract(format!("alpha must be positive, got {alpha}")));
    }
    let nodes = spec.nodes();
    let n = nodes.len();
    let h = (spec.hi - spec.lo) / (n - 1) as f64;
    let log_w: Vec<f64> = (0..n)
        .map(|j| if j == 0 || j == n - 1 { (h / 2.0).ln() } else { h.ln() })
        .collect();
    let steps = policy.schedule().steps();
    let x = DenseArray::column(nodes.clone());
    let mut log_transitions = Vec::with_capacity(steps);
    for t in 1..=steps {
        let means = policy.mean(&x, t)?.mean;
        let var = policy.schedule().reverse_var(t)?;
        let mut flat = Vec::with_capacity(n * n);
        for i in 0..n {
            flat.extend(kernel_row(&nodes, &log_w, means.get(i, 0), var));
        }
        log_transitions.push(flat);
    }
    let init_mean = policy.initial_mean()[0];
    let log_initial = kernel_row(&nodes, &log_w, init_mean, 1.0);
    let reward = nodes.iter().map(|x| reward.eval(&[*x])).collect::<Result<Vec<_>>>()?;
    let mdp = GridMDP {
        nodes,
        steps,
        log_transitions,
        log_initial,
        reward,
        alpha,
    };
    for (t, m) in mdp.pretrained_marginals().iter().enumerate() {
        let edge = m[0] + m[n - 1];
        if edge > 1e-4 {
            return Err(Error::Coverage(format!(
                "marginal at step {t} puts mass {edge:.3e} on the grid boundary"
            )));
        }
    }
    Ok(mdp)
}

/// Exact soft-optimal quantities of a [`GridMDP`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSolution {
    /// `v_t` for `t = 0..=T`.
    pub values: Vec<Vec<f64>>,
    /// `v_{T+1} = alpha log C`.
    pub initial_value: f64,
    /// Soft-optimal transition matrices, `policies[t - 1]` for step `t`.
    pub policies: Vec<Vec<f64>>,
    /// Soft-optimal distribution of `x_T`.
    pub initial_policy: Vec<f64>,
    /// `p*_t` for `t = 0..=T`.
    pub marginals: Vec<Vec<f64>>,
    pub pretrained_marginals: Vec<Vec<f64>>,
    /// `posteriors[t - 1][j * n + i] = p*(x_t = i | x_{t-1} = j)`; zero where undefined.
    pub posteriors: Vec<Vec<f64>>,
    pub pretrained_posteriors: Vec<Vec<f64>>,
    /// `C_t = sum_i exp(v_t(i) / alpha) p_t(i)` for `t = 0..=T`.
    pub constants: Vec<f64>,
}

fn rollout(initial: &[f64], policies: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let steps = policies.len();
    let mut out = vec![vec![0.0; n]; steps + 1];
    out[steps] = initial.to_vec();
    for t in (1..=steps).rev() {
        let p = &policies[t - 1];
        let mut next = vec![0.0; n];
        for i in 0..n {
            let w = out[t][i];
            if w == 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += w * p[i * n + j];
            }
        }
        out[t - 1] = next;
    }
    out
}

fn posteriors(marginals: &[Vec<f64>], policies: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    (1..=policies.len())
        .map(|t| {
            let p = &policies[t - 1];
            let mut post = vec![0.0; n * n];
            for j in 0..n {
                let denom = marginals[t - 1][j];
                if denom <= 0.0 {
                    continue;
                }
                for i in 0..n {
                    post[j * n + i] = marginals[t][i] * p[i * n + j] / denom;
                }
            }
            post
        })
        .collect()
}

/// Backward soft Bellman recursion in log space, then forward rollouts.
pub fn grid_soft_solve(mdp: &GridMDP) -> Result<SoftSolution> {
    if !(mdp.alpha > 0.0) {
        return Err(contract(format!("alpha must be positive, got {}", mdp.alpha)));
    }
    let n = mdp.len();
    let big_t = mdp.steps;
    let alpha = mdp.alpha;
    // log_v[t][i] = v_t(i) / alpha
    let mut log_v = vec![vec![0.0; n]; big_t + 1];
    log_v[0] = mdp.reward.iter().map(|r| r / alpha).collect();
    for t in 1..=big_t {
        let lp = &mdp.log_transitions[t - 1];
        log_v[t] = (0..n)
            .map(|i| lse((0..n).map(|j| lp[i * n + j] + log_v[t - 1][j])))
            .collect();
    }
    let log_c = lse((0..n).map(|i| mdp.log_initial[i] + log_v[big_t][i]));
    if !log_c.is_finite() {
        return Err(Error::Numeric("soft value normalizer is not finite".into()));
    }
    let policies: Vec<Vec<f64>> = (1..=big_t)
        .map(|t| {
            let lp = &mdp.log_transitions[t - 1];
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    p[i * n + j] = (lp[i * n + j] + log_v[t - 1][j] - log_v[t][i]).exp();
                }
            }
            p
        })
        .collect();
    let initial_policy: Vec<f64> = (0..n)
        .map(|i| (mdp.log_initial[i] + log_v[big_t][i] - log_c).exp())
        .collect();
    let marginals = rollout(&initial_policy, &policies, n);
    let pre = mdp.pretrained_marginals();
    let pre_policies: Vec<Vec<f64>> = (1..=big_t).map(|t| mdp.transition(t)).collect();
    let constants = (0..=big_t)
        .map(|t| lse((0..n).map(|i| pre[t][i].ln() + log_v[t][i])).exp())
        .collect();
    let mut values: Vec<Vec<f64>> = log_v.iter().map(|v| v.iter().map(|x| alpha * x).collect()).collect();
    // v_0 is the reward itself, not its round trip through r / alpha
    values[0] = mdp.reward.clone();
    Ok(SoftSolution {
        values,
        initial_value: alpha * log_c,
        posteriors: posteriors(&marginals, &policies, n),
        pretrained_posteriors: posteriors(&pre, &pre_policies, n),
        policies,
        initial_policy,
        marginals,
        pretrained_marginals: pre,
        constants,
    })
}

/// Maximum absolute deviations from the three exactness statements, plus the
/// soft Bellman residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    /// Terminal marginal vs `exp(r/alpha) p_0 / Z`.
    pub terminal_tilt: f64,
    /// `p*_t` vs `exp(v_t/alpha) p_t / C`, worst over `t`.
    pub marginal_tilt: f64,
    /// Spread `max_t C_t - min_t C_t`.
    pub constant_spread: f64,
    /// Soft-optimal vs pre-trained posterior on cells with joint mass above 1e-12.
    pub posterior: f64,
    /// `|1 - sum_j P_t[i][j] exp((v_{t-1}(j) - v_t(i)) / alpha)|`, i.e. the
    /// Bellman residual relative to `exp(v_t(i) / alpha)`.
    pub bellman: f64,
}

impl TheoremReport {
    pub fn max(&self) -> f64 {
        [self.terminal_tilt, self.marginal_tilt, self.constant_spread, self.posterior, self.bellman]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Check a solution against the grid. Marginals are recomputed from the
/// stored policies, so a corrupted policy shows up in the deviations.
pub fn verify_theorems(sol: &SoftSolution, mdp: &GridMDP) -> TheoremReport {
    let n = mdp.len();
    let big_t = mdp.steps;
    let alpha = mdp.alpha;
    let pre = mdp.pretrained_marginals();
    let star = rollout(&sol.initial_policy, &sol.policies, n);

    let tilt: Vec<f64> = (0..n).map(|i| (mdp.reward[i] / alpha).exp() * pre[0][i]).collect();
    let z: f64 = tilt.iter().sum();
    let terminal_tilt = (0..n).map(|i| (star[0][i] - tilt[i] / z).abs()).fold(0.0, f64::max);

    let c = (sol.initial_value / alpha).exp();
    let mut marginal_tilt: f64 = 0.0;
    let mut cs = vec![];
    for t in 0..=big_t {
        let mut ct = 0.0;
        for i in 0..n {
            let w = (sol.values[t][i] / alpha).exp() * pre[t][i];
            ct += w;
            marginal_tilt = marginal_tilt.max((star[t][i] - w / c).abs());
        }
        cs.push(ct);
    }
    let constant_spread = cs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - cs.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut posterior: f64 = 0.0;
    let mut bellman: f64 = 0.0;
    for t in 1..=big_t {
        let p = mdp.transition(t);
        let pol = &sol.policies[t - 1];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += p[i * n + j] * ((sol.values[t - 1][j] - sol.values[t][i]) / alpha).exp();
                let joint = pre[t][i] * p[i * n + j];
                if joint > 1e-12 {
                    let post_pre = joint / pre[t - 1][j];
                    let post_star = star[t][i] * pol[i * n + j] / star[t - 1][j];
                    posterior = posterior.max((post_star - post_pre).abs());
                }
            }
            bellman = bellman.max((1.0 - s).abs());
        }
    }
    TheoremReport {
        terminal_tilt,
        marginal_tilt,
        constant_spread,
        posterior,
        bellman,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(r1: f64) -> GridMDP {
        GridMDP::from_parts(
            vec![0.0, 1.0],
            vec![vec![0.5, 0.5, 0.5, 0.5]],
            vec![0.5, 0.5],
            vec![0.0, r1],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn two_state_hand_enumeration() {
        let mdp = two_state(2f64.ln());
        let sol = grid_soft_solve(&mdp).unwrap();
        for i in 0..2 {
            assert!((sol.values[1][i] - 1.5f64.ln()).abs() < 1e-15);
            assert!((sol.policies[0][i * 2] - 1.0 / 3.0).abs() < 1e-15);
            assert!((sol.policies[0][i * 2 + 1] - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((sol.marginals[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((sol.marginals[0][1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(sol.values[0], mdp.reward);
    }

    #[test]
    fn zero_reward_keeps_pretrained_policy() {
        let mdp = GridMDP::from_parts(
            vec![0.0, 1.0, 2.0],
            vec![vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.4, 0.0]; 2],
            vec![0.3, 0.3, 0.4],
            vec![0.0; 3],
            0.7,
        )
        .unwrap();
        let sol = grid_soft_solve(&mdp).unwrap();
        for t in 0..=2 {
            assert!(sol.values[t].iter().all(|v| v.abs() < 1e-15));
        }
        for t in 1..=2 {
            for (a, b) in sol.policies[t - 1].iter().zip(mdp.transition(t)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let rep = verify_theorems(&sol, &mdp);
        assert!(rep.max() < 1e-14);
    }

    #[test]
    fn rejects_bad_rows_and_alpha() {
        assert!(GridMDP::from_parts(vec![0.0, 1.0], vec![vec![0.5, 0.6, 0.5, 0.5]], vec![0.5, 0.5], vec![0.0; 2], 1.0)
            .is_err());
        assert!(matches!(
            GridMDP::from_parts(vec![0.0, 1.0], vec![vec![0.5; 4]], vec![0.5, 0.5], vec![0.0; 2], 0.0),
            Err(Error::Contract(_))
        ));
    }
}
