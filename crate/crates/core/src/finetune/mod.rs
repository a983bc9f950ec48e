//! KL-regularized fine-tuning of a pre-trained reverse policy.
//!
//! Four update rules share one driver ([`FineTuner`]): clipped soft PPO,
//! reward backpropagation through the sampling chain, reward-weighted
//! maximum likelihood and path consistency learning. Every rule starts from
//! the pre-trained policy (fresh adapter, zero initial shift).

mod backprop;
mod grid;
mod kl;
mod mle;
mod pcl;
mod ppo;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use backprop::reward_backprop_iteration;
pub use grid::{grid_consistency_residual, grid_trajectory_balance, grid_weighted_mle, GridMleConfig, TabularPolicy};
pub use kl::{batch_kl, kl_penalty};
pub use mle::{mle_weights, reward_weighted_mle_iteration};
pub use pcl::{
    pcl_iteration, trajectory_balance_residual, ConsistencyTerms, PclState,
};
pub use ppo::{ppo_iteration, ppo_surrogate, PpoBatch, Surrogate};

use crate::diffusion::PolicyNet;
use crate::error::{config_err, contract, Error, Result};
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{adam_step, Activation, AdamState, Checkpoint, DenseArray};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ppo,
    RewardBackprop,
    WeightedMle,
    Pcl,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::RewardBackprop => "reward-backprop",
            Algorithm::WeightedMle => "weighted-mle",
            Algorithm::Pcl => "pcl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Algorithm::Ppo),
            "reward-backprop" => Ok(Algorithm::RewardBackprop),
            "weighted-mle" => Ok(Algorithm::WeightedMle),
            "pcl" => Ok(Algorithm::Pcl),
            _ => Err(config_err(format!("unknown fine-tuning algorithm `{s}`"))),
        }
    }

    /// Algorithms that divide by `alpha`.
    pub fn needs_positive_alpha(self) -> bool {
        matches!(self, Algorithm::WeightedMle | Algorithm::Pcl)
    }

    pub fn needs_reward_gradient(self) -> bool {
        self == Algorithm::RewardBackprop
    }
}

/// State distribution used to collect training transitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RollIn {
    /// The policy being trained.
    Current,
    /// The frozen pre-trained policy.
    Pretrained,
    /// Current policy for steps above the index, pre-trained below it.
    Mixture(usize),
}

impl RollIn {
    /// Last step index drawn from the current policy when training step `t`
    /// is collected: the chain follows the current policy for steps strictly
    /// above the returned switch.
    pub(crate) fn switch(self, t: usize, top: usize) -> usize {
        match self {
            RollIn::Current => t,
            RollIn::Pretrained => top,
            RollIn::Mixture(k) => t.max(k.min(top)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    /// KL weight.
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Learning-rate multiplier reached at the last iteration (geometric decay).
    pub lr_decay: f64,
    /// PPO ratio clip radius.
    pub clip: f64,
    /// PPO gradient steps per collected batch.
    pub inner_epochs: usize,
    pub rollin: RollIn,
    pub seed: u64,
    pub adapter_hidden: Vec<usize>,
    pub activation: Activation,
    /// PCL value network.
    pub value_hidden: Vec<usize>,
    pub value_lr: f64,
    /// PCL sub-trajectory length; 1 is the one-step residual.
    pub window: usize,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            alpha: 1.0,
            batch_size: 128,
            iterations: 500,
            lr: 1e-2,
            lr_decay: 1.0,
            clip: 0.2,
            inner_epochs: 1,
            rollin: RollIn::Current,
            seed: 0,
            adapter_hidden: vec![32, 32],
            activation: Activation::Tanh,
            value_hidden: vec![32, 32],
            value_lr: 5e-3,
            window: 1,
            checkpoint_every: 0,
        }
    }
}

impl FineTuneConfig {
    /// Checks bounds and algorithm/reward capability clashes. Returns the
    /// first violated constraint.
    pub fn validate(&self, algorithm: Algorithm, reward: &RewardSpec, steps: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(config_err("iterations must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config_err(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(config_err(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if self.inner_epochs == 0 {
            return Err(config_err("inner_epochs must be at least 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(config_err(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if algorithm.needs_positive_alpha() && self.alpha == 0.0 {
            return Err(config_err(format!("{} is undefined at alpha = 0", algorithm.name())));
        }
        if algorithm.needs_reward_gradient() && !reward.is_differentiable() {
            return Err(Error::Capability(format!(
                "{} needs a differentiable reward, got a {} reward without gradient",
                algorithm.name(),
                reward.kind()
            )));
        }
        if algorithm == Algorithm::Pcl {
            if !(self.value_lr > 0.0) {
                return Err(config_err("value_lr must be positive"));
            }
            if self.window == 0 || self.window > steps + 1 {
                return Err(config_err(format!("window must lie in 1..={}, got {}", steps + 1, self.window)));
            }
        }
        if let RollIn::Mixture(k) = self.rollin {
            if k > steps + 1 {
                return Err(config_err(format!("roll-in switch {k} beyond step {}", steps + 1)));
            }
        }
        Ok(())
    }

    /// Learning rate at 0-based `iteration`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let frac = iteration as f64 / self.iterations.max(1) as f64;
        self.lr * self.lr_decay.powf(frac)
    }

    pub(crate) fn value_lr_at(&self, iteration: usize) -> f64 {
        self.value_lr * self.lr_at(iteration) / self.lr
    }
}

/// One line of the training log. Equality ignores the wall-clock column.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    /// Mean terminal reward of the batch collected this iteration.
    pub mean_reward: f64,
    /// Mean per-trajectory KL penalty of that batch.
    pub kl_penalty: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

impl PartialEq for TrainLogRecord {
    fn eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.mean_reward.to_bits() == other.mean_reward.to_bits()
            && self.kl_penalty.to_bits() == other.kl_penalty.to_bits()
            && self.loss.to_bits() == other.loss.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}

/// What an update rule reports back to the driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    pub kl_penalty: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub(crate) fn grad_norm(grads: &[DenseArray]) -> f64 {
    grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Apply an Adam step to the policy's trainable blocks.
pub(crate) fn apply_policy_step(
    policy: &mut PolicyNet,
    grads: &[DenseArray],
    adam: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut params = policy.params();
    adam_step(&mut params, grads, adam, lr)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite policy parameters after update".into()));
    }
    policy.set_params(&params)
}

/// Euclidean distance between two parameter lists.
pub fn param_distance(a: &[DenseArray], b: &[DenseArray]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(contract("parameter lists differ in structure"));
    }
    Ok(a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| (p - q) * (p - q)))
        .sum::<f64>()
        .sqrt())
}

/// Drift of parameters shaped like `template` after `iterations` Adam steps
/// driven by independent standard normal gradients: the distance a pure
/// gradient-noise optimizer travels at this learning rate.
pub fn noise_floor_drift(template: &[DenseArray], lr: f64, iterations: usize, rng: &mut Stream) -> Result<f64> {
    let start = template.to_vec();
    let mut params = template.to_vec();
    let mut adam = AdamState::new(&params);
    for _ in 0..iterations {
        let grads: Vec<DenseArray> = params
            .iter()
            .map(|p| DenseArray::new(p.shape().to_vec(), rng.normals(p.len())))
            .collect::<Result<_>>()?;
        adam_step(&mut params, &grads, &mut adam, lr)?;
    }
    param_distance(&start, &params)
}

/// Drives one fine-tuning run: owns the policy, the optimizer state, the
/// PCL value model and the per-iteration random streams.
#[derive(Clone, Debug)]
pub struct FineTuner {
    pub algorithm: Algorithm,
    pub config: FineTuneConfig,
    pub policy: PolicyNet,
    pretrained: PolicyNet,
    reward: RewardSpec,
    adam: AdamState,
    pcl: Option<PclState>,
    iteration: usize,
    root: u64,
    log: Vec<TrainLogRecord>,
}

impl FineTuner {
    /// Validate the configuration and attach a fresh adapter to `pretrained`.
    pub fn new(algorithm: Algorithm, pretrained: &PolicyNet, reward: RewardSpec, config: FineTuneConfig) -> Result<Self> {
        let steps = pretrained.schedule().steps();
        config.validate(algorithm, &reward, steps)?;
        if reward.dim() != pretrained.dim() {
            return Err(crate::error::dim_err("reward and policy dimensions differ"));
        }
        if !pretrained.schedule().has_densities() && algorithm != Algorithm::RewardBackprop {
            return Err(config_err(format!(
                "{} needs transition densities; the schedule has zero reverse variance",
                algorithm.name()
            )));
        }
        let base = pretrained.pretrained();
        let mut init = Stream::new(config.seed, 1);
        let policy = base
            .clone()
            .with_adapter(&config.adapter_hidden, config.activation, &mut init)?;
        let adam = AdamState::new(&policy.params());
        let pcl = if algorithm == Algorithm::Pcl {
            Some(PclState::new(&policy, &config, &mut init)?)
        } else {
            None
        };
        Ok(FineTuner {
            algorithm,
            config: config.clone(),
            policy,
            pretrained: base,
            reward,
            adam,
            pcl,
            iteration: 0,
            root: config.seed,
            log: vec![],
        })
    }

    pub fn pretrained(&self) -> &PolicyNet {
        &self.pretrained
    }

    pub fn reward(&self) -> &RewardSpec {
        &self.reward
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[TrainLogRecord] {
        &self.log
    }

    pub fn pcl_state(&self) -> Option<&PclState> {
        self.pcl.as_ref()
    }

    /// Random stream of iteration `s`; independent of everything run before.
    fn stream(&self, s: usize) -> Stream {
        Stream::new(self.root, 1000 + s as u64)
    }

    /// One outer iteration of the configured algorithm.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let started = Instant::now();
        let s = self.iteration;
        let mut rng = self.stream(s);
        let lr = self.config.lr_at(s);
        let stats = match self.algorithm {
            Algorithm::Ppo => ppo_iteration(&mut self.policy, &mut self.adam, &self.reward, &self.config, lr, &mut rng)?,
            Algorithm::RewardBackprop => {
                reward_backprop_iteration(&mut self.policy, &mut self.adam, &self.reward, &self.config, lr, &mut rng)?
            }
            Algorithm::WeightedMle => {
                reward_weighted_mle_iteration(&mut self.policy, &mut self.adam, &self.reward, &self.config, lr, &mut rng)?
            }
            Algorithm::Pcl => {
                let state = self.pcl.as_mut().expect("pcl state present");
                let value_lr = self.config.value_lr_at(s);
                pcl_iteration(
                    &mut self.policy,
                    &mut self.adam,
                    state,
                    &self.reward,
                    &self.config,
                    (lr, value_lr),
                    &mut rng,
                )?
            }
        };
        let record = TrainLogRecord {
            iteration: s,
            mean_reward: stats.mean_reward,
            kl_penalty: stats.kl_penalty,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Run the remaining iterations. `on_iteration` sees the tuner after
    /// every step (for checkpointing or streaming logs).
    pub fn run(&mut self, mut on_iteration: impl FnMut(&FineTuner, &TrainLogRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let rec = self.step()?;
            on_iteration(self, &rec)?;
        }
        Ok(())
    }

    /// Trainable state as a checkpoint: adapter, initial mean and, for PCL,
    /// the value network and log-normalizer.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_meta("algorithm", self.algorithm.name());
        ck.insert_meta("iteration", self.iteration);
        if let Some(a) = self.policy.adapter() {
            ck.push_mlp("adapter", a);
        }
        ck.push("initial_mean", DenseArray::matrix(1, self.policy.dim(), self.policy.initial_mean().to_vec()).expect("shape"));
        if let Some(p) = &self.pcl {
            ck.push_mlp("value", &p.value);
            ck.push("log_normalizer", DenseArray::scalar(p.log_normalizer));
        }
        ck
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{BaseDistribution, Schedule};
    use crate::rewards::BlackBox;

    fn policy() -> PolicyNet {
        PolicyNet::analytic(Schedule::new(8, 2.0).unwrap(), BaseDistribution::standard_normal(1))
    }

    #[test]
    fn capability_clashes_rejected() {
        let bb = RewardSpec::BlackBox(BlackBox::new("step", 1, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }));
        let cfg = FineTuneConfig::default();
        assert!(matches!(cfg.validate(Algorithm::RewardBackprop, &bb, 8), Err(Error::Capability(_))));
        assert!(cfg.validate(Algorithm::Ppo, &bb, 8).is_ok());
        let zero = FineTuneConfig {
            alpha: 0.0,
            ..FineTuneConfig::default()
        };
        let lin = RewardSpec::linear(vec![1.0]);
        assert!(zero.validate(Algorithm::WeightedMle, &lin, 8).is_err());
        assert!(zero.validate(Algorithm::Pcl, &lin, 8).is_err());
        assert!(zero.validate(Algorithm::Ppo, &lin, 8).is_ok());
        assert!(zero.validate(Algorithm::RewardBackprop, &lin, 8).is_ok());
    }

    #[test]
    fn bound_checks() {
        let lin = RewardSpec::linear(vec![1.0]);
        for cfg in [
            FineTuneConfig { batch_size: 0, ..Default::default() },
            FineTuneConfig { iterations: 0, ..Default::default() },
            FineTuneConfig { lr: 0.0, ..Default::default() },
            FineTuneConfig { clip: 1.0, ..Default::default() },
            FineTuneConfig { alpha: -1.0, ..Default::default() },
            FineTuneConfig { rollin: RollIn::Mixture(10), ..Default::default() },
        ] {
            assert!(cfg.validate(Algorithm::Ppo, &lin, 8).is_err(), "{cfg:?}");
        }
        let w = FineTuneConfig { window: 10, ..Default::default() };
        assert!(w.validate(Algorithm::Pcl, &lin, 8).is_err());
        let w = FineTuneConfig { window: 9, ..Default::default() };
        assert!(w.validate(Algorithm::Pcl, &lin, 8).is_ok());
    }

    #[test]
    fn records_compare_without_wall_time() {
        let a = TrainLogRecord {
            iteration: 3,
            mean_reward: 0.5,
            kl_penalty: 0.1,
            loss: -0.4,
            grad_norm: 2.0,
            wall_time_s: 0.01,
        };
        let mut b = a.clone();
        b.wall_time_s = 9.0;
        assert_eq!(a, b);
        b.loss = -0.41;
        assert_ne!(a, b);
    }

    #[test]
    fn tuner_starts_at_pretrained() {
        let p = policy();
        let t = FineTuner::new(Algorithm::Ppo, &p, RewardSpec::linear(vec![1.0]), FineTuneConfig::default()).unwrap();
        let x = DenseArray::column(vec![-1.0, 0.3]);
        for s in 1..=9 {
            assert_eq!(t.policy.mean(&x, s).unwrap().mean, p.mean(&x, s).unwrap().mean);
        }
    }

    #[test]
    fn noise_floor_positive_and_reproducible() {
        let tmpl = vec![DenseArray::zeros(&[3, 4]), DenseArray::zeros(&[1, 4])];
        let a = noise_floor_drift(&tmpl, 1e-3, 50, &mut Stream::new(1, 0)).unwrap();
        let b = noise_floor_drift(&tmpl, 1e-3, 50, &mut Stream::new(1, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 50.0 * 1e-3 * 4.0);
    }

    #[test]
    fn mixture_switch() {
        assert_eq!(RollIn::Current.switch(3, 9), 3);
        assert_eq!(RollIn::Pretrained.switch(3, 9), 9);
        assert_eq!(RollIn::Mixture(5).switch(3, 9), 5);
        assert_eq!(RollIn::Mixture(5).switch(7, 9), 7);
    }
}
