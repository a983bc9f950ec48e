use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{BaseDistribution, EpsModel, PolicyNet, PretrainConfig, Schedule};
use crate::error::{config_err, dim_err, Error, Result};
use crate::finetune::{Algorithm, FineTuneConfig};
use crate::guidance::ValueFitConfig;
use crate::oracle::{grid_build, AffineChain, GridSpec};
use crate::rewards::{BlackBox, RegressorConfig, RewardSpec};
use crate::tensor::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pretrain,
    Finetune,
    Guide,
    Oracle,
    Conditional,
    Sweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::Finetune => "finetune",
            ExperimentKind::Guide => "guide",
            ExperimentKind::Oracle => "oracle",
            ExperimentKind::Conditional => "conditional",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub horizon: f64,
    /// Overrides the reverse-step variance `dt`.
    pub reverse_variance: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 32,
            horizon: 4.0,
            reverse_variance: None,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        let s = Schedule::new(self.steps, self.horizon)?;
        match self.reverse_variance {
            Some(v) => s.with_reverse_variance(v),
            None => Ok(s),
        }
    }
}

/// Gaussian mixture with isotropic components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec {
            weights: vec![1.0],
            means: vec![vec![0.0]],
            variances: vec![1.0],
        }
    }
}

impl BaseSpec {
    pub fn build(&self) -> Result<BaseDistribution> {
        BaseDistribution::new(self.weights.clone(), self.means.clone(), self.variances.clone())
    }
}

/// Where the pre-trained noise model comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySource {
    /// Closed-form noise of the base distribution.
    #[default]
    Analytic,
    /// Network saved by a `pretrain` run (`denoiser.ckpt`).
    Checkpoint { path: PathBuf },
}

/// Built-in opaque rewards; none of them exposes a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlackBoxName {
    /// 1 when the first coordinate is positive, else 0.
    Step,
    /// `-sum |x_i|`.
    NegAbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardConfig {
    Linear {
        slope: Vec<f64>,
    },
    Constant {
        value: f64,
    },
    Quadratic {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        c: f64,
    },
    /// Log-likelihood of a component of the base mixture.
    Classifier {
        label: usize,
    },
    BlackBox {
        name: BlackBoxName,
    },
    /// Regressor fitted at run time to a feedback CSV (`x0,...,reward`).
    Learned {
        data: PathBuf,
        #[serde(default)]
        regressor: RegressorConfig,
    },
}

impl RewardConfig {
    /// Whether the built reward will expose a gradient.
    pub fn is_differentiable(&self) -> bool {
        !matches!(self, RewardConfig::BlackBox { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Pre-trained sampling through the guided code path.
    Zero,
    /// Closed-form value of a linear reward on a single-Gaussian base.
    ExactAffine,
    MonteCarlo,
    SoftQ,
    Tweedie,
    PathIntegral,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Zero => "zero",
            Estimator::ExactAffine => "exact-affine",
            Estimator::MonteCarlo => "monte-carlo",
            Estimator::SoftQ => "soft-q",
            Estimator::Tweedie => "tweedie",
            Estimator::PathIntegral => "path-integral",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuideConfig {
    pub estimator: Estimator,
    pub alpha: f64,
    /// Continuations per point for the path-integral estimator.
    pub path_samples: usize,
    pub value_fit: ValueFitConfig,
}

impl Default for GuideConfig {
    fn default() -> Self {
        GuideConfig {
            estimator: Estimator::ExactAffine,
            alpha: 1.0,
            path_samples: 200,
            value_fit: ValueFitConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleCheck {
    /// Project the policy and reward on a grid and verify the exactness statements.
    GridTheorems,
    /// The built-in two-state instance with its hand-enumerated values.
    TwoState,
    /// MALA on the tilted density against the analytic target.
    Mala,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub check: OracleCheck,
    pub alpha: f64,
    pub grid: GridSpec,
    /// Largest deviation accepted by the exact checks.
    pub tolerance: f64,
    pub mala_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            check: OracleCheck::GridTheorems,
            alpha: 1.0,
            grid: GridSpec { lo: -8.0, hi: 8.0, n: 41 },
            tolerance: 1e-10,
            mala_step: 0.5,
        }
    }
}

/// `value-weighted` or a fine-tuning algorithm name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionalMethodName {
    ValueWeighted,
    Ppo,
    RewardBackprop,
    WeightedMle,
    Pcl,
}

impl ConditionalMethodName {
    pub fn algorithm(self) -> Option<Algorithm> {
        match self {
            ConditionalMethodName::ValueWeighted => None,
            ConditionalMethodName::Ppo => Some(Algorithm::Ppo),
            ConditionalMethodName::RewardBackprop => Some(Algorithm::RewardBackprop),
            ConditionalMethodName::WeightedMle => Some(Algorithm::WeightedMle),
            ConditionalMethodName::Pcl => Some(Algorithm::Pcl),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionalConfig {
    pub label: usize,
    pub method: ConditionalMethodName,
    /// Grid for the discretized Bayes check (1D bases only).
    pub grid: Option<GridSpec>,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        ConditionalConfig {
            label: 0,
            method: ConditionalMethodName::ValueWeighted,
            grid: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Terminal samples drawn for evaluation.
    pub samples: usize,
    /// Full trajectories written to `trajectories.csv`.
    pub dump_trajectories: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 10_000,
            dump_trajectories: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Kind of every member run.
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// KL weights to cross with the seeds; empty keeps the configured one.
    pub alphas: Vec<f64>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: ExperimentKind::Finetune,
            seeds: vec![0],
            alphas: vec![],
            threads: 0,
        }
    }
}

/// One experiment, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Fine-tuning algorithm (`finetune` runs).
    #[serde(default)]
    pub algorithm: Option<Algorithm>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub base: BaseSpec,
    #[serde(default)]
    pub policy: PolicySource,
    #[serde(default)]
    pub reward: Option<RewardConfig>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    #[serde(default)]
    pub guide: GuideConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub conditional: ConditionalConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        RunConfig {
            kind,
            seed: 0,
            out: default_out(),
            algorithm: None,
            schedule: ScheduleSpec::default(),
            base: BaseSpec::default(),
            policy: PolicySource::default(),
            reward: None,
            pretrain: PretrainConfig::default(),
            finetune: FineTuneConfig::default(),
            guide: GuideConfig::default(),
            oracle: OracleConfig::default(),
            conditional: ConditionalConfig::default(),
            eval: EvalConfig::default(),
            sweep: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config serialization: {e}")))
    }

    /// Check everything that can be checked without running the pipeline.
    /// The first violated constraint is returned.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule.build()?;
        let base = self.base.build()?;
        let d = base.dim();
        if self.eval.samples < 100 {
            return Err(config_err(format!("eval.samples must be at least 100, got {}", self.eval.samples)));
        }
        if let PolicySource::Checkpoint { path } = &self.policy {
            if !path.is_file() {
                return Err(config_err(format!("policy checkpoint {} does not exist", path.display())));
            }
        }
        match self.kind {
            ExperimentKind::Pretrain => {
                let p = &self.pretrain;
                if p.iterations == 0 || p.batch_size == 0 || !(p.lr > 0.0) {
                    return Err(config_err("pretrain needs iterations, batch size and a positive lr"));
                }
            }
            ExperimentKind::Finetune => {
                let algorithm = self
                    .algorithm
                    .ok_or_else(|| config_err("finetune runs need `algorithm`"))?;
                let reward = self.reward_stub(d)?;
                self.finetune.validate(algorithm, &reward, schedule.steps())?;
            }
            ExperimentKind::Guide => self.validate_guide(&base, d)?,
            ExperimentKind::Oracle => self.validate_oracle(&base, &schedule)?,
            ExperimentKind::Conditional => {
                if base.components() < 2 {
                    return Err(config_err("conditional generation needs a mixture with at least 2 components"));
                }
                if self.conditional.label >= base.components() {
                    return Err(Error::Index(format!(
                        "label {} of a {}-component mixture",
                        self.conditional.label,
                        base.components()
                    )));
                }
                if let Some(alg) = self.conditional.method.algorithm() {
                    let cfg = FineTuneConfig {
                        alpha: 1.0,
                        ..self.finetune.clone()
                    };
                    cfg.validate(alg, &RewardSpec::classifier(base.clone(), self.conditional.label)?, schedule.steps())?;
                }
                if let Some(g) = &self.conditional.grid {
                    if d != 1 {
                        return Err(dim_err("the Bayes grid check needs a 1D base"));
                    }
                    let policy = PolicyNet::analytic(schedule.clone(), base.clone());
                    grid_build(&policy, g, &RewardSpec::classifier(base.clone(), self.conditional.label)?, 1.0)?;
                }
            }
            ExperimentKind::Sweep => {
                let sweep = self.sweep.as_ref().ok_or_else(|| config_err("sweep runs need a [sweep] table"))?;
                if sweep.kind == ExperimentKind::Sweep {
                    return Err(config_err("sweeps cannot nest"));
                }
                if sweep.seeds.is_empty() {
                    return Err(config_err("sweep.seeds is empty"));
                }
                for member in self.sweep_members()? {
                    member.validate()?;
                }
            }
        }
        Ok(())
    }

    fn validate_guide(&self, base: &BaseDistribution, d: usize) -> Result<()> {
        let g = &self.guide;
        if !(g.alpha > 0.0) {
            return Err(config_err(format!("guide.alpha must be positive, got {}", g.alpha)));
        }
        let reward = self.reward_stub(d)?;
        match g.estimator {
            Estimator::Zero => {}
            Estimator::ExactAffine => {
                if !matches!(reward, RewardSpec::Linear { .. }) || base.components() != 1 {
                    return Err(config_err(
                        "the exact-affine estimator needs a linear reward and a single-Gaussian base",
                    ));
                }
            }
            Estimator::MonteCarlo | Estimator::SoftQ => {
                let v = &g.value_fit;
                if v.trajectories < 100 {
                    return Err(config_err("value fitting needs at least 100 trajectories"));
                }
                if g.estimator == Estimator::SoftQ && v.inner_draws < 2 {
                    return Err(config_err("soft Q needs at least 2 inner draws"));
                }
            }
            Estimator::Tweedie => {
                if !reward.is_differentiable() {
                    return Err(Error::Capability(format!(
                        "Tweedie guidance needs a differentiable reward, `{}` has no gradient",
                        reward.kind()
                    )));
                }
            }
            Estimator::PathIntegral => {
                if g.path_samples < 100 {
                    return Err(config_err("guide.path_samples must be at least 100"));
                }
            }
        }
        Ok(())
    }

    fn validate_oracle(&self, base: &BaseDistribution, schedule: &Schedule) -> Result<()> {
        let o = &self.oracle;
        if !(o.alpha > 0.0) {
            return Err(config_err(format!("oracle.alpha must be positive, got {}", o.alpha)));
        }
        if !(o.tolerance > 0.0) {
            return Err(config_err("oracle.tolerance must be positive"));
        }
        match o.check {
            OracleCheck::TwoState => Ok(()),
            OracleCheck::GridTheorems => {
                let reward = self.reward_stub(base.dim())?;
                let policy = self.policy_unchecked(schedule, base)?;
                grid_build(&policy, &o.grid, &reward, o.alpha).map(|_| ())
            }
            OracleCheck::Mala => {
                self.reward_stub(base.dim())?;
                if !(o.mala_step > 0.0) {
                    return Err(config_err("oracle.mala_step must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Reward with learned models replaced by a placeholder so validation
    /// needs no training.
    fn reward_stub(&self, d: usize) -> Result<RewardSpec> {
        let cfg = self.reward.as_ref().ok_or_else(|| config_err("this run needs a [reward] table"))?;
        if let RewardConfig::Learned { data, .. } = cfg {
            if !data.is_file() {
                return Err(config_err(format!("feedback data {} does not exist", data.display())));
            }
            return Ok(RewardSpec::constant(d, 0.0));
        }
        let r = build_reward(cfg, &self.base.build()?, None)?;
        if r.dim() != d {
            return Err(dim_err(format!("reward acts on dimension {}, base has {d}", r.dim())));
        }
        Ok(r)
    }

    fn policy_unchecked(&self, schedule: &Schedule, base: &BaseDistribution) -> Result<PolicyNet> {
        match &self.policy {
            PolicySource::Analytic => Ok(PolicyNet::analytic(schedule.clone(), base.clone())),
            PolicySource::Checkpoint { path } => {
                let ck = Checkpoint::load(path)?;
                let net = ck.mlp("denoiser")?;
                if net.input_dim() != base.dim() + 2 {
                    return Err(dim_err("checkpointed denoiser does not match the base dimension"));
                }
                PolicyNet::new(schedule.clone(), EpsModel::Network(net))
            }
        }
    }

    pub fn schedule_built(&self) -> Result<Schedule> {
        self.schedule.build()
    }

    pub fn base_built(&self) -> Result<BaseDistribution> {
        self.base.build()
    }

    pub fn pretrained_policy(&self) -> Result<PolicyNet> {
        self.policy_unchecked(&self.schedule.build()?, &self.base.build()?)
    }

    /// Member configurations of a sweep, seeds crossed with alphas.
    pub fn sweep_members(&self) -> Result<Vec<RunConfig>> {
        let sweep = self.sweep.as_ref().ok_or_else(|| config_err("not a sweep"))?;
        let alphas: Vec<Option<f64>> = if sweep.alphas.is_empty() {
            vec![None]
        } else {
            sweep.alphas.iter().map(|a| Some(*a)).collect()
        };
        let mut out = vec![];
        for &seed in &sweep.seeds {
            for alpha in &alphas {
                let mut c = self.clone();
                c.kind = sweep.kind;
                c.sweep = None;
                c.seed = seed;
                if let Some(a) = alpha {
                    c.finetune.alpha = *a;
                    c.guide.alpha = *a;
                    c.oracle.alpha = *a;
                }
                out.push(c);
            }
        }
        Ok(out)
    }

    /// The KL weight the run uses.
    pub fn alpha(&self) -> f64 {
        match self.kind {
            ExperimentKind::Finetune => self.finetune.alpha,
            ExperimentKind::Guide => self.guide.alpha,
            ExperimentKind::Oracle => self.oracle.alpha,
            ExperimentKind::Conditional => 1.0,
            ExperimentKind::Pretrain | ExperimentKind::Sweep => f64::INFINITY,
        }
    }

    /// Exact law of the terminal samples when one is known: the base for
    /// pre-training and unguided runs, the tilted Gaussian for a linear
    /// reward on a single-Gaussian base, the labelled component for
    /// conditional generation.
    pub fn analytic_target(&self) -> Result<Option<BaseDistribution>> {
        let base = self.base.build()?;
        let schedule = self.schedule.build()?;
        let zero_guide = self.kind == ExperimentKind::Guide && self.guide.estimator == Estimator::Zero;
        match self.kind {
            ExperimentKind::Pretrain => return Ok(Some(base)),
            _ if zero_guide => return Ok(Some(base)),
            ExperimentKind::Conditional => {
                let k = self.conditional.label;
                return Ok(Some(BaseDistribution::new(
                    vec![1.0],
                    vec![base.means()[k].clone()],
                    vec![base.variances()[k]],
                )?));
            }
            ExperimentKind::Finetune | ExperimentKind::Guide | ExperimentKind::Oracle => {}
            ExperimentKind::Sweep => return Ok(None),
        }
        if base.components() != 1 || self.policy != PolicySource::Analytic {
            return Ok(None);
        }
        match &self.reward {
            Some(RewardConfig::Linear { slope }) if slope.len() == base.dim() => {
                let chain = AffineChain::new(&base, &schedule)?;
                let t = chain.tilted_target(slope, self.alpha())?;
                Ok(Some(BaseDistribution::gaussian(t.mean, t.variance)?))
            }
            Some(RewardConfig::Constant { .. }) => Ok(Some(base)),
            _ => Ok(None),
        }
    }
}

/// Materialize a reward. Learned rewards are fitted with `rng`.
pub fn build_reward(
    cfg: &RewardConfig,
    base: &BaseDistribution,
    rng: Option<&mut crate::rng::Stream>,
) -> Result<RewardSpec> {
    let d = base.dim();
    Ok(match cfg {
        RewardConfig::Linear { slope } => RewardSpec::linear(slope.clone()),
        RewardConfig::Constant { value } => RewardSpec::constant(d, *value),
        RewardConfig::Quadratic { a, b, c } => RewardSpec::quadratic(a.clone(), b.clone(), *c)?,
        RewardConfig::Classifier { label } => RewardSpec::classifier(base.clone(), *label)?,
        RewardConfig::BlackBox { name } => RewardSpec::BlackBox(match name {
            BlackBoxName::Step => BlackBox::new("step", d, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }),
            BlackBoxName::NegAbs => BlackBox::new("neg-abs", d, |x| -x.iter().map(|v| v.abs()).sum::<f64>()),
        }),
        RewardConfig::Learned { data, regressor } => {
            let rng = rng.ok_or_else(|| config_err("learned rewards need a random stream"))?;
            let dataset = crate::rewards::FeedbackDataset::load_csv(data)?;
            if dataset.xs.cols() != d {
                return Err(dim_err("feedback data dimension differs from the base"));
            }
            let (spec, report) = crate::rewards::fit_reward_regressor(&dataset, regressor, rng)?;
            log::info!(
                "reward regressor: train rmse {:.4}, holdout rmse {:.4}",
                report.train_rmse,
                report.holdout_rmse
            );
            spec
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let c = RunConfig::from_toml(
            r#"
kind = "finetune"
algorithm = "ppo"
[reward]
kind = "linear"
slope = [1.0]
"#,
        )
        .unwrap();
        assert_eq!(c.schedule, ScheduleSpec::default());
        assert_eq!(c.finetune, FineTuneConfig::default());
        c.validate().unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("kind = \"oracle\"\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("kind = \"oracle\"\n[finetune]\nalhpa = 1.0\n").is_err());
    }

    #[test]
    fn backprop_with_black_box_is_capability_clash() {
        let mut c = RunConfig::new(ExperimentKind::Finetune);
        c.algorithm = Some(Algorithm::RewardBackprop);
        c.reward = Some(RewardConfig::BlackBox { name: BlackBoxName::Step });
        assert!(matches!(c.validate(), Err(Error::Capability(_))));
    }

    #[test]
    fn zero_alpha_rejected_for_distribution_methods() {
        let mut c = RunConfig::new(ExperimentKind::Finetune);
        c.reward = Some(RewardConfig::Linear { slope: vec![1.0] });
        c.finetune.alpha = 0.0;
        for alg in [Algorithm::WeightedMle, Algorithm::Pcl] {
            c.algorithm = Some(alg);
            assert!(c.validate().is_err());
        }
        c.algorithm = Some(Algorithm::Ppo);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn narrow_grid_fails_coverage() {
        let mut c = RunConfig::new(ExperimentKind::Oracle);
        c.reward = Some(RewardConfig::Linear { slope: vec![1.0] });
        c.oracle.grid = GridSpec { lo: -1.0, hi: 1.0, n: 21 };
        assert!(matches!(c.validate(), Err(Error::Coverage(_))));
    }

    #[test]
    fn sweep_members_cross_seeds_and_alphas() {
        let mut c = RunConfig::new(ExperimentKind::Sweep);
        c.algorithm = Some(Algorithm::Ppo);
        c.reward = Some(RewardConfig::Linear { slope: vec![1.0] });
        c.sweep = Some(SweepConfig {
            seeds: vec![1, 2],
            alphas: vec![0.5, 1.0, 2.0],
            ..Default::default()
        });
        let m = c.sweep_members().unwrap();
        assert_eq!(m.len(), 6);
        assert!(m.iter().all(|r| r.kind == ExperimentKind::Finetune && r.sweep.is_none()));
        c.validate().unwrap();
    }
}
