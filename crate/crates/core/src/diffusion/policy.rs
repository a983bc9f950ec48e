use super::base::BaseDistribution;
use super::schedule::Schedule;
use crate::error::{contract, dim_err, Error, Result};
use crate::rng::Stream;
use crate::tensor::{Activation, DenseArray, Graph, Mlp, Var};

/// Noise predictor of the pre-trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum EpsModel {
    /// Exact conditional-expected noise of a Gaussian-mixture base.
    Analytic(BaseDistribution),
    /// Trained network over `[x, t/T, sigma_t]`.
    Network(Mlp),
}

/// Network input `[x, t/T, sigma_t]`: the time features of step `t`
/// appended to every row of `x`.
pub fn with_time(schedule: &Schedule, x: &DenseArray, t: usize) -> DenseArray {
    let [a, b] = schedule.time_features(t);
    let n = x.rows();
    let feats = DenseArray::matrix(n, 2, (0..n).flat_map(|_| [a, b]).collect()).expect("shape");
    DenseArray::concat_cols(&[x, &feats]).expect("rows agree")
}

impl EpsModel {
    pub fn dim(&self) -> usize {
        match self {
            EpsModel::Analytic(b) => b.dim(),
            EpsModel::Network(m) => m.output_dim(),
        }
    }

    /// Predicted noise for each row of `x` at forward index `t` in `0..=T`.
    pub fn eps(&self, schedule: &Schedule, x: &DenseArray, t: usize) -> Result<DenseArray> {
        match self {
            EpsModel::Analytic(base) => {
                let sigma = schedule.sigma(t)?;
                let marginal = base.noised(schedule.mu(t)?, sigma);
                let mut out = DenseArray::zeros(x.shape());
                for r in 0..x.rows() {
                    let score = marginal.score(x.row(r))?;
                    for (o, s) in out.row_mut(r).iter_mut().zip(score) {
                        *o = -sigma * s;
                    }
                }
                Ok(out)
            }
            EpsModel::Network(m) => {
                schedule.sigma(t)?;
                m.evaluate(&with_time(schedule, x, t))
            }
        }
    }

    /// Predicted noise plus the per-row Jacobian with respect to `x`
    /// (`[rows][d][d]`, row-major).
    pub fn eps_with_jacobian(
        &self,
        schedule: &Schedule,
        x: &DenseArray,
        t: usize,
    ) -> Result<(DenseArray, Vec<f64>)> {
        let d = x.cols();
        match self {
            EpsModel::Analytic(base) => {
                let sigma = schedule.sigma(t)?;
                let marginal = base.noised(schedule.mu(t)?, sigma);
                let mut out = DenseArray::zeros(x.shape());
                let mut jac = Vec::with_capacity(x.rows() * d * d);
                for r in 0..x.rows() {
                    let (score, j) = marginal.score_with_jacobian(x.row(r))?;
                    for (o, s) in out.row_mut(r).iter_mut().zip(score) {
                        *o = -sigma * s;
                    }
                    jac.extend(j.iter().map(|v| -sigma * v));
                }
                Ok((out, jac))
            }
            EpsModel::Network(m) => {
                let value = self.eps(schedule, x, t)?;
                let mut jac = vec![0.0; x.rows() * d * d];
                for k in 0..d {
                    let mut g = Graph::new();
                    let p = m.bind_frozen(&mut g);
                    let xv = g.param(x.clone());
                    let feats = g.constant(with_time(schedule, &DenseArray::zeros(&[x.rows(), 0]), t));
                    let inp = g.concat_cols(&[xv, feats]);
                    let y = m.forward(&mut g, &p, inp);
                    let col = g.column(y, k);
                    let s = g.sum(col);
                    let gx = g.gradient(s, &[xv])?.remove(0);
                    for r in 0..x.rows() {
                        for i in 0..d {
                            jac[r * d * d + k * d + i] = gx.get(r, i);
                        }
                    }
                }
                Ok((value, jac))
            }
        }
    }

    /// Graph node for the predicted noise; differentiable in `x`.
    pub fn eps_graph(&self, schedule: &Schedule, g: &mut Graph, x: Var, t: usize) -> Result<Var> {
        match self {
            EpsModel::Analytic(_) => {
                let xv = g.value(x).clone();
                if g.requires_grad(x) {
                    let (value, jac) = self.eps_with_jacobian(schedule, &xv, t)?;
                    Ok(g.external(x, value, jac))
                } else {
                    Ok(g.constant(self.eps(schedule, &xv, t)?))
                }
            }
            EpsModel::Network(m) => {
                schedule.sigma(t)?;
                let n = g.value(x).rows();
                let feats = g.constant(with_time(schedule, &DenseArray::zeros(&[n, 0]), t));
                let inp = g.concat_cols(&[x, feats]);
                let p = m.bind_frozen(g);
                Ok(m.forward(g, &p, inp))
            }
        }
    }
}

/// Reverse means of a batch and whether the sigma floor was hit.
#[derive(Clone, Debug)]
pub struct MeanEval {
    pub mean: DenseArray,
    pub clamped: bool,
}

/// Graph handles of a policy's trainable blocks.
#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub adapter: Vec<Var>,
    pub shift: Var,
}

impl PolicyVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.adapter.clone();
        v.push(self.shift);
        v
    }
}

/// Gaussian reverse policy `N(rho(x, t), sigma^2(t) I)` with
/// `rho = x + (0.5 x - eps(x, t) / sigma_t) dt`.
///
/// The predicted noise is the frozen pre-trained model plus an optional
/// trainable adapter network; the initial step `T+1` has a trainable mean.
/// A fresh adapter has a zero output layer, so a fine-tunable policy starts
/// exactly at the pre-trained one.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    schedule: Schedule,
    pretrained: EpsModel,
    adapter: Option<Mlp>,
    shift: DenseArray,
}

impl PolicyNet {
    pub fn new(schedule: Schedule, pretrained: EpsModel) -> Result<Self> {
        let d = pretrained.dim();
        if let EpsModel::Network(m) = &pretrained {
            if m.input_dim() != d + 2 {
                return Err(dim_err(format!(
                    "noise network takes {} inputs, expected {}",
                    m.input_dim(),
                    d + 2
                )));
            }
        }
        Ok(PolicyNet {
            schedule,
            pretrained,
            adapter: None,
            shift: DenseArray::zeros(&[1, d]),
        })
    }

    pub fn analytic(schedule: Schedule, base: BaseDistribution) -> Self {
        Self::new(schedule, EpsModel::Analytic(base)).expect("analytic model is consistent")
    }

    /// Attach a trainable adapter with the given hidden widths.
    pub fn with_adapter(mut self, hidden: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        let d = self.dim();
        let mut widths = vec![d + 2];
        widths.extend_from_slice(hidden);
        widths.push(d);
        self.adapter = Some(Mlp::zero_output(&widths, activation, rng)?);
        Ok(self)
    }

    pub fn with_adapter_mlp(mut self, adapter: Mlp) -> Result<Self> {
        if adapter.input_dim() != self.dim() + 2 || adapter.output_dim() != self.dim() {
            return Err(dim_err("adapter widths do not match the policy dimension"));
        }
        self.adapter = Some(adapter);
        Ok(self)
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn pretrained_model(&self) -> &EpsModel {
        &self.pretrained
    }

    pub fn adapter(&self) -> Option<&Mlp> {
        self.adapter.as_ref()
    }

    pub fn initial_mean(&self) -> &[f64] {
        self.shift.values()
    }

    pub fn dim(&self) -> usize {
        self.pretrained.dim()
    }

    /// The same pre-trained model without any fine-tuned components.
    pub fn pretrained(&self) -> PolicyNet {
        PolicyNet {
            schedule: self.schedule.clone(),
            pretrained: self.pretrained.clone(),
            adapter: None,
            shift: DenseArray::zeros(&[1, self.dim()]),
        }
    }

    /// Trainable blocks: adapter tensors followed by the initial mean.
    pub fn params(&self) -> Vec<DenseArray> {
        let mut p: Vec<DenseArray> = self.adapter.iter().flat_map(|a| a.params().to_vec()).collect();
        p.push(self.shift.clone());
        p
    }

    pub fn set_params(&mut self, params: &[DenseArray]) -> Result<()> {
        let n_adapter = self.adapter.as_ref().map_or(0, |a| a.params().len());
        if params.len() != n_adapter + 1 {
            return Err(dim_err("policy parameter block count"));
        }
        if let Some(a) = &mut self.adapter {
            for (dst, src) in a.params_mut().iter_mut().zip(params) {
                if dst.shape() != src.shape() {
                    return Err(dim_err("policy parameter block shape"));
                }
                *dst = src.clone();
            }
        }
        if params[n_adapter].shape() != self.shift.shape() {
            return Err(dim_err("initial mean shape"));
        }
        self.shift = params[n_adapter].clone();
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.steps() + 1 {
            return Err(Error::Index(format!(
                "reverse step {t} outside 1..={}",
                self.schedule.steps() + 1
            )));
        }
        Ok(())
    }

    /// Predicted noise including the adapter, at forward index `t`.
    pub fn eps(&self, x: &DenseArray, t: usize) -> Result<DenseArray> {
        let mut e = self.pretrained.eps(&self.schedule, x, t)?;
        if let Some(a) = &self.adapter {
            let extra = a.evaluate(&with_time(&self.schedule, x, t))?;
            e.axpy(1.0, &extra)?;
        }
        Ok(e)
    }

    /// Marginal score estimate `-eps / sigma_t`.
    pub fn score(&self, x: &DenseArray, t: usize) -> Result<DenseArray> {
        let (s, _) = self.schedule.sigma_floored(t)?;
        Ok(self.eps(x, t)?.map(|e| -e / s))
    }

    /// Reverse means for step `t` in `1..=T+1`.
    pub fn mean(&self, x: &DenseArray, t: usize) -> Result<MeanEval> {
        self.check_step(t)?;
        if x.cols() != self.dim() {
            return Err(dim_err(format!("state of dimension {} for a {}-d policy", x.cols(), self.dim())));
        }
        if t == self.schedule.steps() + 1 {
            let mut mean = DenseArray::zeros(x.shape());
            for r in 0..x.rows() {
                mean.row_mut(r).copy_from_slice(self.shift.values());
            }
            return Ok(MeanEval { mean, clamped: false });
        }
        let (s, clamped) = self.schedule.sigma_floored(t)?;
        let dt = self.schedule.dt();
        let eps = self.eps(x, t)?;
        let mean = x.zip_map(&eps, |xv, ev| xv + (0.5 * xv - ev / s) * dt)?;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("non-finite reverse mean at step {t}")));
        }
        Ok(MeanEval { mean, clamped })
    }

    /// Reverse mean of a single point.
    pub fn reverse_mean(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let xa = DenseArray::matrix(1, x.len(), x.to_vec())?;
        Ok(self.mean(&xa, t)?.mean.into_values())
    }

    /// Register trainable blocks in `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PolicyVars {
        let adapter = match &self.adapter {
            Some(a) if trainable => a.bind(g),
            Some(a) => a.bind_frozen(g),
            None => vec![],
        };
        let shift = if trainable {
            g.param(self.shift.clone())
        } else {
            g.constant(self.shift.clone())
        };
        PolicyVars { adapter, shift }
    }

    /// Graph version of [`PolicyNet::mean`], differentiable in `x` and the
    /// bound parameters.
    pub fn mean_graph(&self, g: &mut Graph, vars: &PolicyVars, x: Var, t: usize) -> Result<Var> {
        self.check_step(t)?;
        let n = g.value(x).rows();
        if t == self.schedule.steps() + 1 {
            let zeros = g.constant(DenseArray::zeros(&[n, self.dim()]));
            return Ok(g.add_row(zeros, vars.shift));
        }
        let (s, _) = self.schedule.sigma_floored(t)?;
        let dt = self.schedule.dt();
        let mut eps = self.pretrained.eps_graph(&self.schedule, g, x, t)?;
        if let Some(a) = &self.adapter {
            let feats = g.constant(with_time(&self.schedule, &DenseArray::zeros(&[n, 0]), t));
            let inp = g.concat_cols(&[x, feats]);
            let extra = a.forward(g, &vars.adapter, inp);
            eps = g.add(eps, extra);
        }
        let a = g.scale(x, 1.0 + 0.5 * dt);
        let b = g.scale(eps, dt / s);
        Ok(g.sub(a, b))
    }

    pub(crate) fn same_schedule(&self, other: &PolicyNet) -> Result<()> {
        if self.schedule != other.schedule {
            return Err(contract("policies use different schedules"));
        }
        if self.dim() != other.dim() {
            return Err(contract("policies have different dimensions"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_policy(steps: usize, horizon: f64) -> PolicyNet {
        PolicyNet::analytic(Schedule::new(steps, horizon).unwrap(), BaseDistribution::standard_normal(1))
    }

    #[test]
    fn analytic_eps_standard_normal() {
        let p = std_policy(16, 4.0);
        let s = p.schedule().clone();
        for t in 0..=16 {
            let x = DenseArray::column(vec![-1.3, 0.0, 2.2]);
            let e = p.pretrained_model().eps(&s, &x, t).unwrap();
            let (m, g) = (s.mu(t).unwrap(), s.sigma(t).unwrap());
            for r in 0..3 {
                let expect = g * x.get(r, 0) / (m * m + g * g);
                assert!((e.get(r, 0) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_mixture_zero_at_origin() {
        let base =
            BaseDistribution::new(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], vec![1.0, 1.0]).unwrap();
        let p = PolicyNet::analytic(Schedule::new(8, 2.0).unwrap(), base);
        for t in 0..=8 {
            let e = p.eps(&DenseArray::column(vec![0.0]), t).unwrap();
            assert!(e.item().abs() < 1e-15);
        }
    }

    #[test]
    fn zero_adapter_keeps_pretrained_mean() {
        let mut rng = Stream::new(1, 0);
        let p = std_policy(8, 2.0);
        let q = p.clone().with_adapter(&[8], Activation::Tanh, &mut rng).unwrap();
        let x = DenseArray::column(vec![0.4, -1.0]);
        for t in 1..=9 {
            assert_eq!(p.mean(&x, t).unwrap().mean, q.mean(&x, t).unwrap().mean);
        }
    }

    #[test]
    fn graph_mean_matches_numeric() {
        let mut rng = Stream::new(2, 0);
        let mut p = std_policy(8, 2.0).with_adapter(&[6], Activation::Tanh, &mut rng).unwrap();
        let mut params = p.params();
        for b in params.iter_mut() {
            for v in b.values_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        p.set_params(&params).unwrap();
        let x = DenseArray::column(vec![0.4, -1.0, 2.5]);
        for t in 1..=9 {
            let mut g = Graph::new();
            let vars = p.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let m = p.mean_graph(&mut g, &vars, xv, t).unwrap();
            let num = p.mean(&x, t).unwrap().mean;
            for (a, b) in g.value(m).values().iter().zip(num.values()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn step_index_checked() {
        let p = std_policy(4, 1.0);
        assert!(matches!(p.reverse_mean(&[0.0], 0), Err(Error::Index(_))));
        assert!(p.reverse_mean(&[0.0], 6).is_err());
        assert!(p.reverse_mean(&[0.0], 5).is_ok());
    }
}
