use serde::{Deserialize, Serialize};

use super::base::BaseDistribution;
use super::schedule::Schedule;
use crate::error::{config_err, contract, dim_err, Result};
use crate::rng::Stream;
use crate::tensor::{adam_step, Activation, AdamState, DenseArray, Graph, Mlp};

/// Training tuples `(x_0, t, noise)`, one per row.
#[derive(Clone, Debug)]
pub struct DenoiseBatch {
    pub x0: DenseArray,
    pub t: Vec<usize>,
    pub noise: DenseArray,
}

impl DenoiseBatch {
    /// Draw `n` tuples with `x_0` from `base` and `t` uniform on `1..=T`.
    pub fn draw(base: &BaseDistribution, schedule: &Schedule, n: usize, rng: &mut Stream) -> Self {
        let d = base.dim();
        let x0 = DenseArray::matrix(n, d, base.sample(n, rng)).expect("shape");
        let t = (0..n).map(|_| 1 + rng.index(schedule.steps())).collect();
        let noise = DenseArray::matrix(n, d, rng.normals(n * d)).expect("shape");
        DenoiseBatch { x0, t, noise }
    }

    /// Perturbed states and per-row network inputs `[x_t, t/T, sigma_t]`.
    fn inputs(&self, schedule: &Schedule) -> Result<(DenseArray, DenseArray)> {
        let (n, d) = (self.x0.rows(), self.x0.cols());
        if self.t.len() != n || self.noise.shape() != self.x0.shape() {
            return Err(dim_err("denoising batch parts disagree"));
        }
        let mut xt = DenseArray::zeros(&[n, d]);
        let mut inp = DenseArray::zeros(&[n, d + 2]);
        for r in 0..n {
            let t = self.t[r];
            let x = super::forward_perturb(schedule, self.x0.row(r), t, self.noise.row(r))?;
            xt.row_mut(r).copy_from_slice(&x);
            let row = inp.row_mut(r);
            row[..d].copy_from_slice(&x);
            row[d..].copy_from_slice(&schedule.time_features(t));
        }
        Ok((xt, inp))
    }
}

/// Mean over the batch of `|noise - eps(x_t, t)|^2`. `eps_fn` receives the
/// perturbed states and their step indices.
pub fn denoising_loss(
    schedule: &Schedule,
    batch: &DenoiseBatch,
    eps_fn: impl Fn(&DenseArray, &[usize]) -> Result<DenseArray>,
) -> Result<f64> {
    if batch.x0.rows() == 0 {
        return Err(contract("denoising loss of an empty batch"));
    }
    let (xt, _) = batch.inputs(schedule)?;
    let pred = eps_fn(&xt, &batch.t)?;
    if pred.shape() != batch.noise.shape() {
        return Err(dim_err("noise prediction shape"));
    }
    let sq: f64 = pred
        .values()
        .iter()
        .zip(batch.noise.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / batch.x0.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            iterations: 2000,
            batch_size: 128,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Loss of the zero predictor on a held-out batch.
    pub zero_baseline: f64,
    /// Loss of the trained network on the same held-out batch.
    pub holdout: f64,
}

/// Fit a noise-prediction network to `base` by denoising score matching.
pub fn pretrain_denoiser(
    base: &BaseDistribution,
    schedule: &Schedule,
    config: &PretrainConfig,
    rng: &mut Stream,
) -> Result<(Mlp, PretrainReport)> {
    if config.iterations == 0 || config.batch_size == 0 {
        return Err(config_err("pretraining needs iterations and batch size >= 1"));
    }
    let d = base.dim();
    let mut widths = vec![d + 2];
    widths.extend_from_slice(&config.hidden);
    widths.push(d);
    let mut init = rng.split(1);
    let mut model = Mlp::new(&widths, config.activation, &mut init)?;
    let mut adam = AdamState::new(model.params());
    let mut data = rng.split(2);
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let batch = DenoiseBatch::draw(base, schedule, config.batch_size, &mut data);
        let (_, inp) = batch.inputs(schedule)?;
        let mut g = Graph::new();
        let p = model.bind(&mut g);
        let x = g.constant(inp);
        let y = model.forward(&mut g, &p, x);
        let target = g.constant(batch.noise.clone());
        let diff = g.sub(y, target);
        let sq = g.square(diff);
        let total = g.sum(sq);
        let loss = g.scale(total, 1.0 / config.batch_size as f64);
        let grads = g.gradient(loss, &p)?;
        losses.push(g.value(loss).item());
        adam_step(model.params_mut(), &grads, &mut adam, config.lr)?;
    }
    let mut hold = rng.split(3);
    let batch = DenoiseBatch::draw(base, schedule, 4096, &mut hold);
    let zero_baseline = denoising_loss(schedule, &batch, |x, _| Ok(DenseArray::zeros(x.shape())))?;
    let (_, inp) = batch.inputs(schedule)?;
    let pred = model.evaluate(&inp)?;
    let holdout = denoising_loss(schedule, &batch, |_, _| Ok(pred.clone()))?;
    Ok((
        model,
        PretrainReport {
            losses,
            zero_baseline,
            holdout,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let s = Schedule::new(10, 3.0).unwrap();
        let b = DenoiseBatch::draw(&BaseDistribution::standard_normal(2), &s, 64, &mut Stream::new(1, 0));
        let noise = b.noise.clone();
        assert_eq!(denoising_loss(&s, &b, |_, _| Ok(noise.clone())).unwrap(), 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let s = Schedule::new(10, 3.0).unwrap();
        let b = DenoiseBatch {
            x0: DenseArray::zeros(&[0, 1]),
            t: vec![],
            noise: DenseArray::zeros(&[0, 1]),
        };
        assert!(matches!(
            denoising_loss(&s, &b, |x, _| Ok(x.clone())),
            Err(crate::Error::Contract(_))
        ));
    }
}
