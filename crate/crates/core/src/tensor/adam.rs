use super::array::DenseArray;
use crate::error::{config_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one block per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<DenseArray>,
    pub v: Vec<DenseArray>,
}

impl AdamState {
    pub fn new(params: &[DenseArray]) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &[DenseArray], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
            v: params.iter().map(|p| DenseArray::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [DenseArray],
    grads: &[DenseArray],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(config_err(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(dim_err("adam: block count mismatch"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(dim_err(format!(
                "adam: shapes {:?} / {:?} / {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = vec![DenseArray::scalar(2.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[DenseArray::scalar(1.0)], &mut st, 0.1).unwrap();
        let (m, v) = (st.m[0].item(), st.v[0].item());
        adam_step(&mut p, &[DenseArray::scalar(0.0)], &mut st, 0.1).unwrap();
        assert_eq!(st.m[0].item(), 0.9 * m);
        assert_eq!(st.v[0].item(), 0.999 * v);
    }

    #[test]
    fn fresh_state_zero_gradient_is_noop() {
        let mut p = vec![DenseArray::scalar(2.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[DenseArray::scalar(0.0)], &mut st, 0.1).unwrap();
        assert_eq!(p[0].item(), 2.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![DenseArray::scalar(1.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[DenseArray::scalar(1.0)], &mut st, 0.1).unwrap();
        // mhat = 1, vhat = 1, step = 0.1 / (1 + 1e-8)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expect).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = vec![DenseArray::scalar(0.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            adam_step(&mut p, &[DenseArray::scalar(-3.0)], &mut st, 0.01).unwrap();
        }
        assert!(p[0].item() > 0.5);
    }

    #[test]
    fn non_positive_lr_is_config_error() {
        let mut p = vec![DenseArray::scalar(0.0)];
        let mut st = AdamState::new(&p);
        let g = [DenseArray::scalar(1.0)];
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.0),
            Err(crate::Error::Config(_))
        ));
        assert!(adam_step(&mut p, &g, &mut st, -1.0).is_err());
    }
}
