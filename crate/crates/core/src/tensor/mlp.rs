use serde::{Deserialize, Serialize};

use super::array::DenseArray;
use super::graph::{Graph, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(config_err(format!("unknown activation `{s}`"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Fully connected network. Hidden layers use `activation`, the output layer
/// is affine. Weights are stored `[in, out]`, biases `[1, out]`, so a batch
/// `[n, in]` maps to `[n, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<DenseArray>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        let mut m = Self::zeros(widths, activation)?;
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in m.params[2 * l].values_mut() {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(m)
    }

    /// All parameters zero; the network outputs zero everywhere.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(config_err(format!("invalid layer widths {widths:?}")));
        }
        let params = widths
            .windows(2)
            .flat_map(|w| [DenseArray::zeros(&[w[0], w[1]]), DenseArray::zeros(&[1, w[1]])])
            .collect();
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            params,
        })
    }

    /// Random hidden layers with a zeroed output layer, so the network starts
    /// at exactly zero but has non-degenerate gradients.
    pub fn zero_output(widths: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        let mut m = Self::new(widths, activation, rng)?;
        let last = m.params.len() - 2;
        for v in m.params[last].values_mut() {
            *v = 0.0;
        }
        Ok(m)
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<DenseArray>) -> Result<Self> {
        let m = Self::zeros(widths, activation)?;
        if params.len() != m.params.len()
            || params.iter().zip(&m.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(dim_err("parameter blocks do not match layer widths"));
        }
        Ok(Mlp {
            params,
            ..m
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[DenseArray] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseArray] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Numeric forward pass on a batch `[n, in]`.
    pub fn evaluate(&self, input: &DenseArray) -> Result<DenseArray> {
        if input.cols() != self.widths[0] {
            return Err(dim_err(format!(
                "network expects {} inputs, got {}",
                self.widths[0],
                input.cols()
            )));
        }
        let layers = self.widths.len() - 1;
        let mut h = input.clone();
        for l in 0..layers {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            let mut z = h.matmul(w)?;
            for r in 0..z.rows() {
                for (zv, bv) in z.row_mut(r).iter_mut().zip(b.values()) {
                    *zv += bv;
                    if l + 1 < layers {
                        *zv = self.activation.apply(*zv);
                    }
                }
            }
            h = z;
        }
        if !h.is_finite() {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(h)
    }

    /// Single-row convenience wrapper around [`Mlp::evaluate`].
    pub fn evaluate_row(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DenseArray::matrix(1, input.len(), input.to_vec())?;
        Ok(self.evaluate(&x)?.into_values())
    }

    /// Register the parameters as differentiable leaves of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Register the parameters as constants (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Graph forward pass using previously bound parameter handles.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Var {
        let layers = self.widths.len() - 1;
        let mut h = input;
        for l in 0..layers {
            let z = g.matmul(h, params[2 * l]);
            let z = g.add_row(z, params[2 * l + 1]);
            h = if l + 1 < layers {
                match self.activation {
                    Activation::Tanh => g.tanh(z),
                    Activation::Relu => g.relu(z),
                }
            } else {
                z
            };
        }
        h
    }

    /// Gradient of `sum(output)` with respect to the input rows. Rows are
    /// independent, so row `i` of the result is the input gradient of sample `i`.
    pub fn input_gradient(&self, input: &DenseArray) -> Result<DenseArray> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let x = g.param(input.clone());
        let y = self.forward(&mut g, &p, x);
        let s = g.sum(y);
        Ok(g.gradient(s, &[x])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let m = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        let x = DenseArray::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 9.0]).unwrap();
        assert!(m.evaluate(&x).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_affine_layer() {
        let w = DenseArray::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = DenseArray::zeros(&[1, 2]);
        let m = Mlp::from_params(&[2, 2], Activation::Tanh, vec![w, b]).unwrap();
        assert_eq!(m.evaluate_row(&[0.7, -1.3]).unwrap(), vec![0.7, -1.3]);
    }

    #[test]
    fn param_count_matches_widths() {
        let m = Mlp::zeros(&[3, 16, 16, 1], Activation::Relu).unwrap();
        assert_eq!(m.param_count(), 3 * 16 + 16 + 16 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = Mlp::zeros(&[2, 4, 1], Activation::Tanh).unwrap();
        assert!(matches!(m.evaluate_row(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn glorot_bounds() {
        let mut s = Stream::new(3, 0);
        let m = Mlp::new(&[4, 8, 1], Activation::Tanh, &mut s).unwrap();
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(m.params()[0].values().iter().all(|w| w.abs() <= bound));
        assert!(m.params()[1].values().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn graph_and_numeric_paths_agree() {
        let mut s = Stream::new(5, 0);
        let m = Mlp::new(&[2, 6, 6, 3], Activation::Tanh, &mut s).unwrap();
        let x = DenseArray::matrix(2, 2, vec![0.3, -0.1, 1.5, 2.0]).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = m.forward(&mut g, &p, xv);
        assert_eq!(g.value(y), &m.evaluate(&x).unwrap());
    }
}
