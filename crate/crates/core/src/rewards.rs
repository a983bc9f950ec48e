//! Reward functions: closed-form, opaque black-box, mixture-classifier
//! log-likelihoods, and regressors fitted to offline feedback.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::BaseDistribution;
use crate::error::{config_err, contract, dim_err, Error, Result};
use crate::rng::Stream;
use crate::tensor::{adam_step, Activation, AdamState, DenseArray, Graph, Mlp, Var};

/// Rewards beyond this magnitude are treated as numeric failures, since
/// `exp(r / alpha)` weights appear downstream.
pub const REWARD_BOUND: f64 = 1e6;

type RewardFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Opaque reward handle. A gradient is available only if one was supplied.
#[derive(Clone)]
pub struct BlackBox {
    pub name: String,
    dim: usize,
    f: RewardFn,
    grad: Option<GradFn>,
}

impl BlackBox {
    pub fn new(name: &str, dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        BlackBox {
            name: name.to_string(),
            dim,
            f: Arc::new(f),
            grad: None,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }
}

impl fmt::Debug for BlackBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBox")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("differentiable", &self.grad.is_some())
            .finish()
    }
}

#[derive(Clone, Debug)]
pub enum RewardSpec {
    /// `a . x`
    Linear { a: Vec<f64> },
    /// `x' A x + b . x + c` with symmetric `A`.
    Quadratic { a: Vec<Vec<f64>>, b: Vec<f64>, c: f64 },
    BlackBox(BlackBox),
    /// `log p(label | x)` under a Gaussian-mixture class model.
    Classifier { label: usize, mixture: BaseDistribution },
    /// Regressor over `x` with a single output.
    Learned(Mlp),
}

/// Log posterior probability of component `label` given `x`.
pub fn classifier_log_likelihood(mixture: &BaseDistribution, x: &[f64], label: usize) -> Result<f64> {
    if label >= mixture.components() {
        return Err(Error::Index(format!(
            "label {label} for a {}-component mixture",
            mixture.components()
        )));
    }
    Ok(mixture.log_responsibilities(x)?[label])
}

impl RewardSpec {
    pub fn linear(a: Vec<f64>) -> Self {
        RewardSpec::Linear { a }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        RewardSpec::Quadratic {
            a: vec![vec![0.0; dim]; dim],
            b: vec![0.0; dim],
            c,
        }
    }

    pub fn quadratic(a: Vec<Vec<f64>>, b: Vec<f64>, c: f64) -> Result<Self> {
        let d = b.len();
        if a.len() != d || a.iter().any(|r| r.len() != d) {
            return Err(dim_err("quadratic reward matrix must be d x d"));
        }
        for i in 0..d {
            for j in 0..i {
                if (a[i][j] - a[j][i]).abs() > 1e-12 {
                    return Err(config_err("quadratic reward matrix must be symmetric"));
                }
            }
        }
        Ok(RewardSpec::Quadratic { a, b, c })
    }

    pub fn classifier(mixture: BaseDistribution, label: usize) -> Result<Self> {
        if label >= mixture.components() {
            return Err(Error::Index(format!("label {label} out of range")));
        }
        Ok(RewardSpec::Classifier { label, mixture })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RewardSpec::Linear { .. } => "linear",
            RewardSpec::Quadratic { .. } => "quadratic",
            RewardSpec::BlackBox(_) => "black-box",
            RewardSpec::Classifier { .. } => "classifier",
            RewardSpec::Learned(_) => "learned",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            RewardSpec::Linear { a } => a.len(),
            RewardSpec::Quadratic { b, .. } => b.len(),
            RewardSpec::BlackBox(bb) => bb.dim,
            RewardSpec::Classifier { mixture, .. } => mixture.dim(),
            RewardSpec::Learned(m) => m.input_dim(),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        match self {
            RewardSpec::BlackBox(bb) => bb.grad.is_some(),
            _ => true,
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(dim_err(format!("point of dimension {} for a {}-d reward", x.len(), self.dim())));
        }
        Ok(())
    }

    fn guard(v: f64) -> Result<f64> {
        if !v.is_finite() || v.abs() > REWARD_BOUND {
            return Err(Error::Numeric(format!("reward {v} outside the guarded range")));
        }
        Ok(v)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        let v = match self {
            RewardSpec::Linear { a } => a.iter().zip(x).map(|(a, x)| a * x).sum(),
            RewardSpec::Quadratic { a, b, c } => {
                let mut v = *c;
                for i in 0..x.len() {
                    v += b[i] * x[i];
                    for j in 0..x.len() {
                        v += x[i] * a[i][j] * x[j];
                    }
                }
                v
            }
            RewardSpec::BlackBox(bb) => (bb.f)(x),
            RewardSpec::Classifier { label, mixture } => classifier_log_likelihood(mixture, x, *label)?,
            RewardSpec::Learned(m) => m.evaluate_row(x)?[0],
        };
        Self::guard(v)
    }

    pub fn eval_batch(&self, x: &DenseArray) -> Result<Vec<f64>> {
        (0..x.rows()).map(|r| self.eval(x.row(r))).collect()
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let g = match self {
            RewardSpec::Linear { a } => a.clone(),
            RewardSpec::Quadratic { a, b, .. } => (0..x.len())
                .map(|i| b[i] + 2.0 * (0..x.len()).map(|j| a[i][j] * x[j]).sum::<f64>())
                .collect(),
            RewardSpec::BlackBox(bb) => match &bb.grad {
                Some(gf) => gf(x),
                None => {
                    return Err(Error::Capability(format!(
                        "black-box reward `{}` has no gradient",
                        bb.name
                    )))
                }
            },
            RewardSpec::Classifier { label, mixture } => {
                // grad log p(y|x) = grad log N_y(x) - grad log p(x)
                let total = mixture.score(x)?;
                let m = &mixture.means()[*label];
                let v = mixture.variances()[*label];
                x.iter()
                    .zip(m)
                    .zip(total)
                    .map(|((xi, mi), s)| -(xi - mi) / v - s)
                    .collect()
            }
            RewardSpec::Learned(m) => {
                let xa = DenseArray::matrix(1, x.len(), x.to_vec())?;
                m.input_gradient(&xa)?.into_values()
            }
        };
        if g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("invalid reward gradient".into()));
        }
        Ok(g)
    }

    /// Per-row rewards `[n, 1]` as a graph node, differentiable in `x`.
    pub fn graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.is_differentiable() {
            return Err(Error::Capability(format!("{} reward is not differentiable", self.kind())));
        }
        let xv = g.value(x).clone();
        if xv.cols() != self.dim() {
            return Err(dim_err("reward input dimension"));
        }
        let d = self.dim();
        match self {
            RewardSpec::Linear { a } => {
                let av = g.constant(DenseArray::matrix(d, 1, a.clone())?);
                Ok(g.matmul(x, av))
            }
            RewardSpec::Quadratic { a, b, c } => {
                let am = g.constant(DenseArray::matrix(d, d, a.iter().flatten().cloned().collect())?);
                let bv = g.constant(DenseArray::matrix(d, 1, b.clone())?);
                let ax = g.matmul(x, am);
                let xax = g.mul(ax, x);
                let q = g.row_sum(xax);
                let lin = g.matmul(x, bv);
                let s = g.add(q, lin);
                Ok(g.add_const(s, *c))
            }
            RewardSpec::Learned(m) => {
                let p = m.bind_frozen(g);
                Ok(m.forward(g, &p, x))
            }
            RewardSpec::BlackBox(_) | RewardSpec::Classifier { .. } => {
                let vals = self.eval_batch(&xv)?;
                let mut jac = Vec::with_capacity(xv.rows() * d);
                for r in 0..xv.rows() {
                    jac.extend(self.gradient(xv.row(r))?);
                }
                Ok(g.external(x, DenseArray::column(vals), jac))
            }
        }
    }
}

/// Offline `(x, r(x))` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackDataset {
    pub xs: DenseArray,
    pub rewards: Vec<f64>,
    pub provenance: String,
}

impl FeedbackDataset {
    pub fn new(xs: DenseArray, rewards: Vec<f64>, provenance: &str) -> Result<Self> {
        if xs.rows() != rewards.len() {
            return Err(dim_err("feedback rows and rewards differ in count"));
        }
        if !xs.is_finite() || rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite feedback data".into()));
        }
        Ok(FeedbackDataset {
            xs,
            rewards,
            provenance: provenance.to_string(),
        })
    }

    /// Label points with a reward.
    pub fn label(xs: DenseArray, reward: &RewardSpec, provenance: &str) -> Result<Self> {
        let r = reward.eval_batch(&xs)?;
        Self::new(xs, r, provenance)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
        let d = self.xs.cols();
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.push("r".into());
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for (i, r) in self.rewards.iter().enumerate() {
            let mut rec: Vec<String> = self.xs.row(i).iter().map(|v| format!("{v:e}")).collect();
            rec.push(format!("{r:e}"));
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
        let cols = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.len();
        if cols < 2 {
            return Err(Error::Parse("feedback CSV needs x columns and r".into()));
        }
        let mut xs = vec![];
        let mut rewards = vec![];
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{v}`"))))
                .collect::<Result<_>>()?;
            xs.extend_from_slice(&vals[..cols - 1]);
            rewards.push(vals[cols - 1]);
        }
        let n = rewards.len();
        Self::new(DenseArray::matrix(n, cols - 1, xs)?, rewards, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub iterations: usize,
    pub lr: f64,
    /// Fraction of the data held out for reporting.
    pub holdout: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            iterations: 3000,
            lr: 5e-3,
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RegressionReport {
    pub train_rmse: f64,
    pub holdout_rmse: f64,
    /// All inputs identical; a constant model was returned.
    pub degenerate: bool,
}

fn rmse(model: &Mlp, xs: &DenseArray, ys: &[f64]) -> Result<f64> {
    if ys.is_empty() {
        return Ok(0.0);
    }
    let p = model.evaluate(xs)?;
    let s: f64 = p.values().iter().zip(ys).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / ys.len() as f64).sqrt())
}

fn subset(data: &FeedbackDataset, idx: &[usize]) -> (DenseArray, Vec<f64>) {
    let d = data.xs.cols();
    let xs = idx.iter().flat_map(|&i| data.xs.row(i).to_vec()).collect();
    (
        DenseArray::matrix(idx.len(), d, xs).expect("shape"),
        idx.iter().map(|&i| data.rewards[i]).collect(),
    )
}

/// Squared-error regression of the rewards on `x`, full batch with Adam.
pub fn fit_reward_regressor(
    data: &FeedbackDataset,
    config: &RegressorConfig,
    rng: &mut Stream,
) -> Result<(RewardSpec, RegressionReport)> {
    if data.len() < 10 {
        return Err(contract(format!("regression needs at least 10 samples, got {}", data.len())));
    }
    if !(0.0..1.0).contains(&config.holdout) {
        return Err(config_err("holdout fraction must lie in [0, 1)"));
    }
    let d = data.xs.cols();
    let mut widths = vec![d];
    widths.extend_from_slice(&config.hidden);
    widths.push(1);
    let mean_r = data.rewards.iter().sum::<f64>() / data.len() as f64;

    let first = data.xs.row(0);
    let degenerate = (1..data.len()).all(|i| data.xs.row(i) == first);
    if degenerate {
        log::warn!("feedback inputs are all identical; fitting a constant reward");
        let mut m = Mlp::zeros(&widths, config.activation)?;
        let last = m.params().len() - 1;
        m.params_mut()[last].values_mut()[0] = mean_r;
        let all: Vec<usize> = (0..data.len()).collect();
        let (xs, ys) = subset(data, &all);
        let e = rmse(&m, &xs, &ys)?;
        return Ok((
            RewardSpec::Learned(m),
            RegressionReport {
                train_rmse: e,
                holdout_rmse: e,
                degenerate,
            },
        ));
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng.split(1);
    for i in (1..order.len()).rev() {
        order.swap(i, shuffle.index(i + 1));
    }
    let n_hold = (config.holdout * data.len() as f64).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let (xs, ys) = subset(data, train_idx);
    let (hx, hy) = subset(data, hold_idx);

    let mut model = Mlp::new(&widths, config.activation, &mut rng.split(2))?;
    let last = model.params().len() - 1;
    model.params_mut()[last].values_mut()[0] = mean_r;
    let mut adam = AdamState::new(model.params());
    let target = DenseArray::column(ys.clone());
    let n = ys.len() as f64;
    for _ in 0..config.iterations {
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let x = g.constant(xs.clone());
        let y = model.forward(&mut g, &p, x);
        let t = g.constant(target.clone());
        let diff = g.sub(y, t);
        let sq = g.square(diff);
        let s = g.sum(sq);
        let loss = g.scale(s, 1.0 / n);
        let grads = g.gradient(loss, &p)?;
        adam_step(model.params_mut(), &grads, &mut adam, config.lr)?;
    }
    let report = RegressionReport {
        train_rmse: rmse(&model, &xs, &ys)?,
        holdout_rmse: rmse(&model, &hx, &hy)?,
        degenerate,
    };
    Ok((RewardSpec::Learned(model), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bumps() -> BaseDistribution {
        BaseDistribution::new(vec![0.5, 0.5], vec![vec![-3.0], vec![3.0]], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn linear_and_quadratic_values() {
        assert_eq!(RewardSpec::linear(vec![1.0, 0.0]).eval(&[2.0, 5.0]).unwrap(), 2.0);
        let q = RewardSpec::quadratic(vec![vec![-1.0, 0.0], vec![0.0, -1.0]], vec![0.0, 0.0], 0.0).unwrap();
        assert_eq!(q.eval(&[1.0, 1.0]).unwrap(), -2.0);
    }

    #[test]
    fn classifier_reward_at_right_mean() {
        let r = RewardSpec::classifier(two_bumps(), 1).unwrap();
        let expect = -(-18.0f64).exp().ln_1p();
        assert!((r.eval(&[3.0]).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn classifier_normalizes_and_is_symmetric() {
        let m = two_bumps();
        assert!((classifier_log_likelihood(&m, &[0.0], 0).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        for x in [-4.0, -0.3, 0.0, 1.1, 7.0] {
            let s: f64 = (0..2).map(|y| classifier_log_likelihood(&m, &[x], y).unwrap().exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(classifier_log_likelihood(&m, &[3.0], 1).unwrap() > 0.99f64.ln());
        assert!(matches!(classifier_log_likelihood(&m, &[0.0], 2), Err(Error::Index(_))));
    }

    #[test]
    fn black_box_without_gradient_is_capability_error() {
        let r = RewardSpec::BlackBox(BlackBox::new("step", 1, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }));
        assert_eq!(r.eval(&[0.5]).unwrap(), 1.0);
        assert!(!r.is_differentiable());
        assert!(matches!(r.gradient(&[0.5]), Err(Error::Capability(_))));
    }

    #[test]
    fn bound_guard() {
        let r = RewardSpec::linear(vec![1.0]);
        assert!(matches!(r.eval(&[2e6]), Err(Error::Numeric(_))));
    }

    #[test]
    fn too_few_samples() {
        let d = FeedbackDataset::new(DenseArray::column(vec![0.0; 5]), vec![1.0; 5], "t").unwrap();
        assert!(matches!(
            fit_reward_regressor(&d, &RegressorConfig::default(), &mut Stream::new(0, 0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identical_inputs_give_constant_model() {
        let d = FeedbackDataset::new(DenseArray::column(vec![0.7; 20]), (0..20).map(|i| i as f64).collect(), "t")
            .unwrap();
        let (spec, rep) = fit_reward_regressor(&d, &RegressorConfig::default(), &mut Stream::new(0, 0)).unwrap();
        assert!(rep.degenerate);
        assert!((spec.eval(&[0.7]).unwrap() - 9.5).abs() < 1e-12);
    }
}
