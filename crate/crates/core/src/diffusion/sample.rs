use super::policy::{MeanEval, PolicyNet};
use super::schedule::Schedule;
use crate::error::{dim_err, Error, Result};
use crate::rng::Stream;
use crate::tensor::DenseArray;

/// One reverse transition applied to a whole batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    /// Reverse step index; produces `x_{t-1}` (or `x_T` when `t = T+1`).
    pub t: usize,
    pub mean: DenseArray,
    /// Standard normal draws, one row per trajectory.
    pub noise: DenseArray,
    pub variance: f64,
    /// Per-row Gaussian log-density of the realized transition. NaN when the
    /// step variance is zero.
    pub log_density: Vec<f64>,
}

/// Batch of reverse chains. `states[t]` holds `x_t` for every trajectory,
/// `t = 0..=top`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub top: usize,
    pub states: Vec<DenseArray>,
    /// Transitions in generation order (highest index first).
    pub steps: Vec<Step>,
    /// Steps where the perturbation scale hit the floor.
    pub clamped_steps: Vec<usize>,
    pub rewards: Option<Vec<f64>>,
}

/// A single realized chain `x_T ... x_0`, indexed by step.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `states[t] = x_t`.
    pub states: Vec<Vec<f64>>,
    /// `noises[t]` is the draw of step `t`; index 0 is empty.
    pub noises: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub log_densities: Vec<f64>,
    pub reward: Option<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.states[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states[0].cols()
    }

    pub fn terminal(&self) -> &DenseArray {
        &self.states[0]
    }

    pub fn step(&self, t: usize) -> Option<&Step> {
        self.steps.iter().find(|s| s.t == t)
    }

    /// Sum of stored log-densities per trajectory.
    pub fn total_log_density(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for s in &self.steps {
            for (o, l) in out.iter_mut().zip(&s.log_density) {
                *o += l;
            }
        }
        out
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        let top_step = self.steps.first().map_or(0, |s| s.t);
        let len = top_step.max(self.top) + 1;
        let mut noises = vec![vec![]; len];
        let mut means = vec![vec![]; len];
        let mut variances = vec![f64::NAN; len];
        let mut log_densities = vec![f64::NAN; len];
        for s in &self.steps {
            noises[s.t] = s.noise.row(i).to_vec();
            means[s.t] = s.mean.row(i).to_vec();
            variances[s.t] = s.variance;
            log_densities[s.t] = s.log_density[i];
        }
        Trajectory {
            states: self.states.iter().map(|x| x.row(i).to_vec()).collect(),
            noises,
            means,
            variances,
            log_densities,
            reward: self.rewards.as_ref().map(|r| r[i]),
        }
    }
}

/// Where a chain begins.
#[derive(Clone, Debug)]
pub enum ChainStart {
    /// Draw `x_T` from the initial step `T+1`.
    Initial { n: usize, dim: usize },
    /// Continue from given states `x_t`.
    At { t: usize, x: DenseArray },
}

/// Run a reverse chain with caller-supplied means. `mean_fn(t, x_t)` must
/// return the mean of step `t`; for `t = T+1` it receives a zero batch.
///
/// With `final_mean_only`, step 1 returns its mean without noise.
pub fn run_chain(
    schedule: &Schedule,
    start: ChainStart,
    rng: &mut Stream,
    final_mean_only: bool,
    mut mean_fn: impl FnMut(usize, &DenseArray) -> Result<MeanEval>,
) -> Result<TrajectoryBatch> {
    let big_t = schedule.steps();
    let (top, mut x, mut first_step) = match start {
        ChainStart::Initial { n, dim } => (big_t, DenseArray::zeros(&[n, dim]), big_t + 1),
        ChainStart::At { t, x } => {
            if t > big_t {
                return Err(Error::Index(format!("chain start {t} beyond {big_t}")));
            }
            (t, x, t)
        }
    };
    let (n, d) = (x.rows(), x.cols());
    let mut states = vec![DenseArray::zeros(&[n, d]); top + 1];
    let mut steps = Vec::with_capacity(first_step);
    let mut clamped_steps = vec![];
    if first_step == top {
        states[top] = x.clone();
    }
    while first_step >= 1 {
        let t = first_step;
        let eval = mean_fn(t, &x)?;
        if eval.mean.shape() != x.shape() {
            return Err(dim_err(format!("mean at step {t} has shape {:?}", eval.mean.shape())));
        }
        if eval.clamped {
            clamped_steps.push(t);
        }
        let mut variance = schedule.reverse_var(t)?;
        if t == 1 && final_mean_only {
            variance = 0.0;
        }
        let sd = variance.sqrt();
        let noise = DenseArray::matrix(n, d, rng.normals(n * d))?;
        let next = eval.mean.zip_map(&noise, |m, e| m + sd * e)?;
        if !next.is_finite() {
            return Err(Error::Numeric(format!("non-finite state produced at step {t}")));
        }
        let log_density = if variance > 0.0 {
            (0..n)
                .map(|r| super::gaussian_log_density(next.row(r), eval.mean.row(r), variance))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![f64::NAN; n]
        };
        states[t - 1] = next.clone();
        steps.push(Step {
            t,
            mean: eval.mean,
            noise,
            variance,
            log_density,
        });
        x = next;
        first_step -= 1;
    }
    Ok(TrajectoryBatch {
        top,
        states,
        steps,
        clamped_steps,
        rewards: None,
    })
}

/// `n` full chains from `policy`.
pub fn sample_trajectories(policy: &PolicyNet, n: usize, rng: &mut Stream) -> Result<TrajectoryBatch> {
    run_chain(
        policy.schedule(),
        ChainStart::Initial { n, dim: policy.dim() },
        rng,
        false,
        |t, x| policy.mean(x, t),
    )
}

/// Chains that follow `current` for steps above `switch` and `pretrained`
/// from step `switch` down, so `x_switch` is the last state drawn from the
/// current policy. `switch` ranges over `0..=T+1`.
pub fn sample_composed(
    current: &PolicyNet,
    pretrained: &PolicyNet,
    switch: usize,
    n: usize,
    rng: &mut Stream,
) -> Result<TrajectoryBatch> {
    current.same_schedule(pretrained)?;
    run_chain(
        current.schedule(),
        ChainStart::Initial { n, dim: current.dim() },
        rng,
        false,
        |t, x| {
            if t > switch {
                current.mean(x, t)
            } else {
                pretrained.mean(x, t)
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::BaseDistribution;

    #[test]
    fn transitions_replay_from_stored_noise() {
        let p = PolicyNet::analytic(Schedule::new(6, 2.0).unwrap(), BaseDistribution::standard_normal(2));
        let b = sample_trajectories(&p, 5, &mut Stream::new(9, 1)).unwrap();
        for i in 0..5 {
            let tr = b.trajectory(i);
            for t in 1..=6 {
                let rho = p.reverse_mean(&tr.states[t], t).unwrap();
                let sd = tr.variances[t].sqrt();
                for j in 0..2 {
                    assert_eq!(tr.states[t - 1][j], rho[j] + sd * tr.noises[t][j]);
                }
                let lp = super::super::gaussian_log_density(&tr.states[t - 1], &rho, tr.variances[t]).unwrap();
                assert_eq!(lp, tr.log_densities[t]);
            }
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let p = PolicyNet::analytic(Schedule::new(6, 2.0).unwrap(), BaseDistribution::standard_normal(1));
        let a = sample_trajectories(&p, 7, &mut Stream::new(4, 0)).unwrap();
        let b = sample_trajectories(&p, 7, &mut Stream::new(4, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn continuation_starts_at_given_state() {
        let p = PolicyNet::analytic(Schedule::new(6, 2.0).unwrap(), BaseDistribution::standard_normal(1));
        let x = DenseArray::column(vec![0.5, 1.5]);
        let b = run_chain(p.schedule(), ChainStart::At { t: 3, x: x.clone() }, &mut Stream::new(1, 0), false, |t, x| {
            p.mean(x, t)
        })
        .unwrap();
        assert_eq!(b.states[3], x);
        assert_eq!(b.steps.len(), 3);
        assert_eq!(b.steps[0].t, 3);
    }
}
