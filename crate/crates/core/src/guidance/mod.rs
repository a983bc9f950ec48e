//! Inference-time guidance: the pre-trained reverse means are shifted by
//! `sigma^2(t) grad v / alpha` with the value gradient taken from one of
//! several estimators, and the pre-trained parameters are never touched.

mod estimators;
mod fit;

use serde::{Deserialize, Serialize};

pub use estimators::{
    path_integral_grad, tweedie_posterior_mean, tweedie_value_grad, PathIntegralEstimate, TweedieGrad, MU_FLOOR,
};
pub use fit::{fit_value_mc, fit_value_softq, soft_backup, FitReport, ValueFitConfig};

use crate::diffusion::{run_chain, with_time, BaseDistribution, ChainStart, MeanEval, PolicyNet, Schedule, TrajectoryBatch};
use crate::error::{contract, dim_err, Error, Result};
use crate::finetune::{Algorithm, FineTuneConfig, FineTuner, TrainLogRecord};
use crate::oracle::AffineChain;
use crate::rewards::RewardSpec;
use crate::rng::Stream;
use crate::tensor::{Checkpoint, DenseArray, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMethod {
    MonteCarlo,
    SoftQ,
    TweedieImplicit,
    PathIntegralImplicit,
}

impl ValueMethod {
    pub fn name(self) -> &'static str {
        match self {
            ValueMethod::MonteCarlo => "monte-carlo",
            ValueMethod::SoftQ => "soft-q",
            ValueMethod::TweedieImplicit => "tweedie-implicit",
            ValueMethod::PathIntegralImplicit => "path-integral-implicit",
        }
    }
}

/// Fitted soft value `v(x, t)`, a network over `[x, t/T, sigma_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueModel {
    net: Mlp,
    method: ValueMethod,
    schedule: Schedule,
}

impl ValueModel {
    pub fn new(net: Mlp, method: ValueMethod, schedule: Schedule) -> Result<Self> {
        if net.output_dim() != 1 || net.input_dim() < 3 {
            return Err(dim_err("value network must map [x, t/T, sigma] to a scalar"));
        }
        Ok(ValueModel { net, method, schedule })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn method(&self) -> ValueMethod {
        self.method
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim() - 2
    }

    pub fn evaluate(&self, x: &DenseArray, t: usize) -> Result<Vec<f64>> {
        self.schedule.sigma(t)?;
        Ok(self.net.evaluate(&with_time(&self.schedule, x, t))?.into_values())
    }

    pub fn value(&self, x: &[f64], t: usize) -> Result<f64> {
        Ok(self.evaluate(&DenseArray::matrix(1, x.len(), x.to_vec())?, t)?[0])
    }

    /// Exact input gradient of the network, one row per point.
    pub fn gradient(&self, x: &DenseArray, t: usize) -> Result<DenseArray> {
        self.schedule.sigma(t)?;
        let full = self.net.input_gradient(&with_time(&self.schedule, x, t))?;
        let d = self.dim();
        let mut out = DenseArray::zeros(&[x.rows(), d]);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&full.row(r)[..d]);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_meta("value.method", self.method.name());
        ck.insert_meta("schedule.steps", self.schedule.steps());
        ck.insert_meta("schedule.horizon", format!("{:e}", self.schedule.horizon()));
        ck.push_mlp("value", &self.net);
        ck
    }
}

/// Where the guided sampler takes its value gradient from.
#[derive(Clone, Debug)]
pub enum GuidanceSource {
    /// No guidance.
    Zero,
    Fitted(ValueModel),
    /// Exact affine soft value of a linear reward on a single-Gaussian base.
    ExactAffine { chain: AffineChain, slope: Vec<f64> },
    /// `grad r(E[x_0 | x_t])` through the pre-trained posterior mean.
    Tweedie(RewardSpec),
    /// Weighted first-step noises of pre-trained continuations, per point.
    PathIntegral { reward: RewardSpec, samples: usize, seed: u64 },
    /// Exact log-posterior of a mixture label under the forward-noised
    /// mixture, the soft value of a classifier reward at `alpha = 1`.
    NoisedClassifier { mixture: BaseDistribution, label: usize },
}

impl GuidanceSource {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceSource::Zero => "zero",
            GuidanceSource::Fitted(m) => m.method().name(),
            GuidanceSource::ExactAffine { .. } => "exact-affine",
            GuidanceSource::Tweedie(_) => "tweedie",
            GuidanceSource::PathIntegral { .. } => "path-integral",
            GuidanceSource::NoisedClassifier { .. } => "noised-classifier",
        }
    }
}

/// Pre-trained policy plus a value-gradient source.
#[derive(Clone, Debug)]
pub struct GuidedPolicy {
    pretrained: PolicyNet,
    pub source: GuidanceSource,
    pub alpha: f64,
}

/// Per-step shift magnitudes of one guided run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostic {
    pub t: usize,
    pub mean_shift_norm: f64,
    /// Smallest effective sample size seen (path-integral source only).
    pub min_ess: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GuidedSamples {
    pub batch: TrajectoryBatch,
    pub diagnostics: Vec<StepDiagnostic>,
}

impl GuidedPolicy {
    /// `alpha = f64::INFINITY` turns guidance off.
    pub fn new(pretrained: &PolicyNet, source: GuidanceSource, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(contract(format!("guidance needs alpha > 0, got {alpha}")));
        }
        let d = pretrained.dim();
        let ok = match &source {
            GuidanceSource::Zero => true,
            GuidanceSource::Fitted(m) => m.dim() == d,
            GuidanceSource::ExactAffine { chain, slope } => {
                chain.dim() == d && slope.len() == d && chain.schedule == *pretrained.schedule()
            }
            GuidanceSource::Tweedie(r) => {
                if !r.is_differentiable() {
                    return Err(Error::Capability("Tweedie guidance needs a differentiable reward".into()));
                }
                r.dim() == d
            }
            GuidanceSource::PathIntegral { reward, .. } => reward.dim() == d,
            GuidanceSource::NoisedClassifier { mixture, label } => {
                if *label >= mixture.components() {
                    return Err(Error::Index(format!("label {label} of a {}-component mixture", mixture.components())));
                }
                mixture.dim() == d
            }
        };
        if !ok {
            return Err(dim_err(format!("{} guidance does not match the policy", source.name())));
        }
        Ok(GuidedPolicy {
            pretrained: pretrained.pretrained(),
            source,
            alpha,
        })
    }

    pub fn pretrained(&self) -> &PolicyNet {
        &self.pretrained
    }

    /// `grad v_s` at every row of `x`, `s` in `0..=T`.
    pub fn value_gradient(&self, x: &DenseArray, s: usize) -> Result<DenseArray> {
        let d = self.pretrained.dim();
        let schedule = self.pretrained.schedule();
        let rows = |f: &dyn Fn(&[f64]) -> Result<Vec<f64>>| -> Result<DenseArray> {
            let mut out = DenseArray::zeros(&[x.rows(), d]);
            for r in 0..x.rows() {
                out.row_mut(r).copy_from_slice(&f(x.row(r))?);
            }
            Ok(out)
        };
        match &self.source {
            GuidanceSource::Zero | GuidanceSource::PathIntegral { .. } => Ok(DenseArray::zeros(&[x.rows(), d])),
            GuidanceSource::Fitted(m) => m.gradient(x, s),
            GuidanceSource::ExactAffine { chain, slope } => {
                let b = chain.value_slopes(slope)?.swap_remove(s);
                rows(&|_| Ok(b.clone()))
            }
            GuidanceSource::Tweedie(r) => rows(&|p| Ok(tweedie_value_grad(&self.pretrained, r, p, s)?.grad)),
            GuidanceSource::NoisedClassifier { mixture, label } => {
                let noised = mixture.noised(schedule.mu(s)?, schedule.sigma(s)?);
                let clf = RewardSpec::classifier(noised, *label)?;
                rows(&|p| clf.gradient(p))
            }
        }
    }

    /// Mean shift of step `t` in `1..=T+1`. Steps `t <= T` use
    /// `sigma^2(t) grad v_{t-1}(x_t) / alpha`; the initial step evaluates
    /// `grad v_T` at the pre-trained initial mean.
    pub fn shift(&self, x: &DenseArray, t: usize) -> Result<(DenseArray, Option<f64>)> {
        let schedule = self.pretrained.schedule();
        let big_t = schedule.steps();
        let n = x.rows();
        let d = self.pretrained.dim();
        if self.alpha.is_infinite() {
            return Ok((DenseArray::zeros(&[n, d]), None));
        }
        let var = schedule.reverse_var(t)?;
        if let GuidanceSource::PathIntegral { reward, samples, seed } = &self.source {
            let mut rng = Stream::new(*seed, t as u64);
            let mut out = DenseArray::zeros(&[n, d]);
            let mut min_ess = f64::INFINITY;
            for r in 0..n {
                let est = path_integral_grad(&self.pretrained, reward, x.row(r), t, self.alpha, *samples, &mut rng)?;
                min_ess = min_ess.min(est.ess);
                out.row_mut(r).copy_from_slice(&est.shift);
            }
            return Ok((out, Some(min_ess)));
        }
        let grad = if t == big_t + 1 {
            let g = self.value_gradient(&DenseArray::zeros(&[1, d]), big_t)?;
            DenseArray::matrix(n, d, (0..n).flat_map(|_| g.row(0).to_vec()).collect())?
        } else {
            self.value_gradient(x, t - 1)?
        };
        Ok((grad.map(|v| var * v / self.alpha), None))
    }

    /// Guided reverse mean; a non-finite shift is reported with its step.
    pub fn mean(&self, x: &DenseArray, t: usize) -> Result<MeanEval> {
        Ok(self.mean_with_shift(x, t)?.0)
    }

    fn mean_with_shift(&self, x: &DenseArray, t: usize) -> Result<(MeanEval, f64, Option<f64>)> {
        let mut eval = self.pretrained.mean(x, t)?;
        if matches!(self.source, GuidanceSource::Zero) {
            return Ok((eval, 0.0, None));
        }
        let (shift, ess) = self.shift(x, t)?;
        if !shift.is_finite() {
            return Err(Error::Numeric(format!("non-finite guidance shift at step {t}")));
        }
        let norm = (0..shift.rows())
            .map(|r| shift.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / shift.rows().max(1) as f64;
        eval.mean.axpy(1.0, &shift)?;
        Ok((eval, norm, ess))
    }
}

/// Run the guided reverse chain for `n` samples.
pub fn value_weighted_sample(guided: &GuidedPolicy, n: usize, rng: &mut Stream) -> Result<GuidedSamples> {
    let mut diagnostics = vec![];
    let batch = run_chain(
        guided.pretrained.schedule(),
        ChainStart::Initial {
            n,
            dim: guided.pretrained.dim(),
        },
        rng,
        false,
        |t, x| {
            let (eval, norm, ess) = guided.mean_with_shift(x, t)?;
            diagnostics.push(StepDiagnostic {
                t,
                mean_shift_norm: norm,
                min_ess: ess,
            });
            Ok(eval)
        },
    )?;
    Ok(GuidedSamples { batch, diagnostics })
}

/// How to sample from the label-conditional distribution.
#[derive(Clone, Debug)]
pub enum ConditionalMethod {
    /// Guided sampling with the exact noised-classifier value.
    ValueWeighted,
    /// Fine-tune with the classifier reward (alpha forced to 1), then sample.
    Finetune { algorithm: Algorithm, config: FineTuneConfig },
}

#[derive(Clone, Debug)]
pub struct ConditionalSamples {
    pub samples: DenseArray,
    /// Training log when a fine-tuning method was used.
    pub log: Vec<TrainLogRecord>,
}

/// Samples from `p(x | y) ~ p(y | x) p_pre(x)`: the reward is the classifier
/// log-likelihood of `label` and `alpha = 1`.
pub fn conditional_generate(
    pretrained: &PolicyNet,
    mixture: &BaseDistribution,
    label: usize,
    method: &ConditionalMethod,
    n: usize,
    rng: &mut Stream,
) -> Result<ConditionalSamples> {
    let reward = RewardSpec::classifier(mixture.clone(), label)?;
    let mut probe = rng.split(7);
    let probes = mixture.sample(2000, &mut probe);
    let d = mixture.dim();
    let best = probes
        .chunks(d)
        .map(|x| reward.eval(x).map(f64::exp))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if best < 1e-6 {
        return Err(Error::Degenerate(format!(
            "label {label} has posterior below 1e-6 on the whole support"
        )));
    }
    match method {
        ConditionalMethod::ValueWeighted => {
            let guided = GuidedPolicy::new(
                pretrained,
                GuidanceSource::NoisedClassifier {
                    mixture: mixture.clone(),
                    label,
                },
                1.0,
            )?;
            let out = value_weighted_sample(&guided, n, rng)?;
            Ok(ConditionalSamples {
                samples: out.batch.terminal().clone(),
                log: vec![],
            })
        }
        ConditionalMethod::Finetune { algorithm, config } => {
            let cfg = FineTuneConfig {
                alpha: 1.0,
                ..config.clone()
            };
            let mut tuner = FineTuner::new(*algorithm, pretrained, reward, cfg)?;
            tuner.run(|_, _| Ok(()))?;
            let batch = crate::diffusion::sample_trajectories(&tuner.policy, n, rng)?;
            Ok(ConditionalSamples {
                samples: batch.terminal().clone(),
                log: tuner.log().to_vec(),
            })
        }
    }
}
