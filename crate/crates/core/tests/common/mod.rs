#![allow(dead_code)]

use difftune::rng::Stream;
use difftune::tensor::{DenseArray, Graph, Var};

/// A random smooth computation on four parameter leaves
/// (`x [n, m]`, `w [m, m]`, `b [1, m]`, `c [n, 1]`), reduced to a scalar.
/// Kinked ops (relu, max, clamp) are left out so central differences are
/// meaningful everywhere.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub inputs: Vec<DenseArray>,
    pub ops: Vec<(u8, usize)>,
}

impl RandomGraph {
    pub fn new(seed: u64, max_depth: usize) -> Self {
        let mut rng = Stream::new(seed, 77);
        let n = 1 + rng.index(4);
        let m = 2 + rng.index(3);
        let mut u = |k: usize, s: f64| -> Vec<f64> { (0..k).map(|_| s * rng.uniform_range(-1.0, 1.0)).collect() };
        let inputs = vec![
            DenseArray::matrix(n, m, u(n * m, 1.0)).unwrap(),
            DenseArray::matrix(m, m, u(m * m, 1.0 / (m as f64).sqrt())).unwrap(),
            DenseArray::matrix(1, m, u(m, 1.0)).unwrap(),
            DenseArray::matrix(n, 1, u(n, 1.0)).unwrap(),
        ];
        let depth = 1 + rng.index(max_depth);
        let ops = (0..depth).map(|i| (rng.index(10) as u8, rng.index(i + 1))).collect();
        RandomGraph { inputs, ops }
    }

    /// Returns the scalar output and the leaf handles.
    pub fn build(&self, g: &mut Graph, inputs: &[DenseArray]) -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = inputs.iter().map(|a| g.param(a.clone())).collect();
        let (x, w, b, c) = (leaves[0], leaves[1], leaves[2], leaves[3]);
        let m = inputs[0].cols();
        let mut pool = vec![x];
        let mut h = x;
        for &(op, pick) in &self.ops {
            let other = pool[pick.min(pool.len() - 1)];
            h = match op {
                0 => g.matmul(h, w),
                1 => g.add_row(h, b),
                2 => g.mul_col(h, c),
                3 => g.tanh(h),
                4 => {
                    let t = g.tanh(h);
                    g.exp(t)
                }
                5 => {
                    let s = g.square(h);
                    let p = g.add_const(s, 1.0);
                    g.log(p)
                }
                6 => {
                    let t = g.tanh(other);
                    g.mul(h, t)
                }
                7 => {
                    let s = g.sub(h, other);
                    g.scale(s, 0.5)
                }
                8 => {
                    let cols: Vec<Var> = (0..m).rev().map(|j| g.column(h, j)).collect();
                    g.concat_cols(&cols)
                }
                _ => {
                    let ld = g.gaussian_log_density(h, other, 1.5);
                    let s = g.scale(ld, 0.1);
                    let t = g.tanh(s);
                    let n = g.neg(h);
                    g.mul_col(n, t)
                }
            };
            pool.push(h);
        }
        let mean = g.mean(h);
        let rs = g.row_sum(h);
        let sq = g.square(rs);
        let tail = g.sum(sq);
        let tail = g.scale(tail, 0.25);
        (g.add(mean, tail), leaves)
    }

    pub fn eval(&self, inputs: &[DenseArray]) -> f64 {
        let mut g = Graph::new();
        let (out, _) = self.build(&mut g, inputs);
        g.value(out).item()
    }

    pub fn reverse(&self) -> (f64, Vec<DenseArray>) {
        let mut g = Graph::new();
        let (out, leaves) = self.build(&mut g, &self.inputs);
        let grads = g.gradient(out, &leaves).unwrap();
        (g.value(out).item(), grads)
    }

    /// Fourth-order central differences with step `h (1 + |x|)`.
    pub fn finite_differences(&self, h: f64) -> Vec<DenseArray> {
        let mut out = vec![];
        for k in 0..self.inputs.len() {
            let mut grad = self.inputs[k].clone();
            for i in 0..self.inputs[k].len() {
                let x = self.inputs[k].values()[i];
                let step = h * (1.0 + x.abs());
                let at = |d: f64| {
                    let mut moved = self.inputs.clone();
                    moved[k].values_mut()[i] = x + d;
                    self.eval(&moved)
                };
                grad.values_mut()[i] =
                    (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
            }
            out.push(grad);
        }
        out
    }

    /// `max |reverse - fd| / max(max |fd|, 1e-8)` over all leaves.
    pub fn relative_error(&self) -> f64 {
        let (_, rev) = self.reverse();
        let fd = self.finite_differences(1e-3);
        let mut num: f64 = 0.0;
        let mut den: f64 = 1e-8;
        for (a, b) in rev.iter().zip(&fd) {
            for (p, q) in a.values().iter().zip(b.values()) {
                num = num.max((p - q).abs());
                den = den.max(q.abs());
            }
        }
        num / den
    }
}

pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Equal-size empirical W1: mean gap of order statistics.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
}

/// Law of `x_0` for the analytic standard-normal chain: `x_T ~ N(0, 1)`,
/// then `x_{t-1} = (1 - dt/2) x_t + sqrt(dt) e`, so the terminal variance is
/// `c^{2T} + dt * sum_{k<T} c^{2k}`.
pub fn standard_chain_terminal_variance(steps: usize, horizon: f64) -> f64 {
    let dt = horizon / steps as f64;
    let c2 = (1.0 - 0.5 * dt).powi(2);
    c2.powi(steps as i32) + dt * (0..steps).map(|k| c2.powi(k as i32)).sum::<f64>()
}

/// Log-sum-exp.
pub fn lse(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}
