use crate::diffusion::{PolicyNet, Trajectory, TrajectoryBatch};
use crate::error::{contract, Result};
use crate::tensor::DenseArray;

fn step_variance(policy: &PolicyNet, t: usize) -> Result<f64> {
    let v = policy.schedule().reverse_var(t)?;
    if !(v > 0.0) {
        return Err(contract(format!("KL penalty undefined: step {t} has zero variance")));
    }
    Ok(v)
}

/// Path KL between two Gaussian reverse chains along one trajectory:
/// `sum_t |rho(x_t, t) - rho_pre(x_t, t)|^2 / (2 sigma^2(t))` over steps
/// `1..=T+1`, the last one comparing initial means.
pub fn kl_penalty(policy: &PolicyNet, pretrained: &PolicyNet, trajectory: &Trajectory) -> Result<f64> {
    policy.same_schedule(pretrained)?;
    let big_t = policy.schedule().steps();
    if trajectory.states.len() != big_t + 1 {
        return Err(contract(format!(
            "trajectory has {} states, the schedule needs {}",
            trajectory.states.len(),
            big_t + 1
        )));
    }
    let mut total = 0.0;
    for t in 1..=big_t + 1 {
        let var = step_variance(policy, t)?;
        let x = if t <= big_t { &trajectory.states[t] } else { &trajectory.states[big_t] };
        let a = policy.reverse_mean(x, t)?;
        let b = pretrained.reverse_mean(x, t)?;
        let sq: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
        total += sq / (2.0 * var);
    }
    Ok(total)
}

/// Per-trajectory path KL of a whole batch.
pub fn batch_kl(policy: &PolicyNet, pretrained: &PolicyNet, batch: &TrajectoryBatch) -> Result<Vec<f64>> {
    policy.same_schedule(pretrained)?;
    let big_t = policy.schedule().steps();
    if batch.top != big_t {
        return Err(contract("batch does not start at x_T"));
    }
    let n = batch.len();
    let mut out = vec![0.0; n];
    for t in 1..=big_t + 1 {
        let var = step_variance(policy, t)?;
        let x: &DenseArray = &batch.states[t.min(big_t)];
        let a = policy.mean(x, t)?.mean;
        let b = pretrained.mean(x, t)?.mean;
        for (r, o) in out.iter_mut().enumerate() {
            let sq: f64 = a.row(r).iter().zip(b.row(r)).map(|(p, q)| (p - q) * (p - q)).sum();
            *o += sq / (2.0 * var);
        }
    }
    Ok(out)
}
