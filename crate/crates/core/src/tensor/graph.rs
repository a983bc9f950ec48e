use super::array::DenseArray;
use crate::error::{contract, dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Columns(Var, usize),
    Clamp(Var, f64, f64),
    Maximum(Var, Var),
    GaussLogDensity { x: Var, mean: Var, var: f64 },
    /// Row-wise map with caller-supplied Jacobians, `[rows][out][in]` flattened.
    External { input: Var, jac: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

/// Eager reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's parents precede it and the graph is acyclic by construction.
///
/// Operations do not return `Result`; a dimension mismatch or non-finite
/// value marks the graph as failed and is reported by [`Graph::check`] and
/// [`Graph::gradient`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    failure: Option<(bool, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parent indices of a node, for inspecting topology.
    pub fn parents(&self, v: Var) -> Vec<usize> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::Maximum(a, b) => vec![a.0, b.0],
            Op::GaussLogDensity { x, mean, .. } => vec![x.0, mean.0],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Columns(a, _)
            | Op::Clamp(a, _, _) => vec![a.0],
            Op::External { input, .. } => vec![input.0],
            Op::Concat(parts) => parts.iter().map(|p| p.0).collect(),
        }
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Error if any operation so far failed.
    pub fn check(&self) -> Result<()> {
        match &self.failure {
            Some((true, msg)) => Err(Error::Dimension(msg.clone())),
            Some((false, msg)) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    fn fail(&mut self, msg: String) {
        if self.failure.is_none() {
            self.failure = Some((true, msg));
        }
    }

    fn push(&mut self, value: DenseArray, op: Op, needs_grad: bool) -> Var {
        if self.failure.is_none() && !value.is_finite() {
            self.failure = Some((false, format!("non-finite value at node {}", self.nodes.len())));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Whether gradients can flow into `v` from some parameter.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> bool {
        if self.value(a).shape() != self.value(b).shape() {
            let msg = format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            );
            self.fail(msg);
            false
        } else {
            true
        }
    }

    fn elementwise2(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = if self.binary_same_shape(a, b, "elementwise") {
            self.value(a).zip_map(self.value(b), f).expect("shapes checked")
        } else {
            self.value(a).clone()
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.elementwise2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.elementwise2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.elementwise2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.elementwise2(a, b, Op::Maximum(a, b), f64::max)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `[n, k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = match self.value(a).matmul(self.value(b)) {
            Ok(v) => v,
            Err(e) => {
                self.fail(e.to_string());
                DenseArray::zeros(&[self.value(a).rows(), self.value(b).cols()])
            }
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Add a `[1, m]` row to every row of an `[n, m]` array.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let m = va.cols();
        let value = if vr.rows() != 1 || vr.cols() != m {
            let msg = format!("add_row: {:?} + {:?}", va.shape(), vr.shape());
            self.fail(msg);
            self.value(a).clone()
        } else {
            let mut out = va.clone();
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(vr.values()) {
                    *o += b;
                }
            }
            out
        };
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiply each row of an `[n, m]` array by the matching entry of an
    /// `[n, 1]` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        let value = if vc.cols() != 1 || vc.rows() != va.rows() {
            let msg = format!("mul_col: {:?} * {:?}", va.shape(), vc.shape());
            self.fail(msg);
            self.value(a).clone()
        } else {
            let mut out = va.clone();
            for r in 0..out.rows() {
                let s = vc.values()[r];
                for o in out.row_mut(r) {
                    *o *= s;
                }
            }
            out
        };
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(DenseArray::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all entries, `[1, 1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `[n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let vals = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(DenseArray::column(vals), Op::RowSum(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let arrays: Vec<&DenseArray> = parts.iter().map(|p| self.value(*p)).collect();
        let value = match DenseArray::concat_cols(&arrays) {
            Ok(v) => v,
            Err(e) => {
                self.fail(e.to_string());
                self.value(parts[0]).clone()
            }
        };
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Column `j` as `[n, 1]`.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let va = self.value(a);
        if j >= va.cols() {
            let msg = format!("column {j} of {:?}", va.shape());
            self.fail(msg);
            let v = self.value(a).clone();
            return self.push(v, Op::Columns(a, 0), false);
        }
        let vals = (0..va.rows()).map(|r| va.get(r, j)).collect();
        let ng = self.ng(a);
        self.push(DenseArray::column(vals), Op::Columns(a, j), ng)
    }

    /// Per-row isotropic Gaussian log-density `[n, 1]` of `x` under
    /// `N(mean, var I)`.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, var: f64) -> Var {
        if !(var > 0.0) && self.failure.is_none() {
            self.failure = Some((false, format!("gaussian_log_density with variance {var}")));
        }
        self.binary_same_shape(x, mean, "gaussian_log_density");
        let (vx, vm) = (self.value(x), self.value(mean));
        let d = vx.cols() as f64;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
        let vals = (0..vx.rows())
            .map(|r| {
                let sq: f64 = vx
                    .row(r)
                    .iter()
                    .zip(vm.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                norm - sq / (2.0 * var)
            })
            .collect();
        let ng = self.ng(x) || self.ng(mean);
        self.push(
            DenseArray::column(vals),
            Op::GaussLogDensity { x, mean, var },
            ng,
        )
    }

    /// Row-wise function with known Jacobian. `value` is `[n, out]` and
    /// `jac` holds, for each row, the `out x in` Jacobian in row-major order.
    pub fn external(&mut self, input: Var, value: DenseArray, jac: Vec<f64>) -> Var {
        let vi = self.value(input);
        if value.rows() != vi.rows() || jac.len() != vi.rows() * value.cols() * vi.cols() {
            let msg = format!(
                "external: input {:?}, output {:?}, jacobian {}",
                vi.shape(),
                value.shape(),
                jac.len()
            );
            self.fail(msg);
        }
        let ng = self.ng(input);
        self.push(value, Op::External { input, jac }, ng)
    }

    /// Reverse accumulation of `d output / d wrt`. `output` must be `[1, 1]`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<DenseArray>> {
        self.check()?;
        if self.value(output).len() != 1 {
            return Err(contract(format!(
                "gradient of non-scalar output with shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DenseArray::filled(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        wrt.iter()
            .map(|v| {
                if v.0 > output.0 {
                    return Ok(DenseArray::zeros(self.value(*v).shape()));
                }
                Ok(grads[v.0]
                    .clone()
                    .unwrap_or_else(|| DenseArray::zeros(self.value(*v).shape())))
            })
            .collect()
    }

    fn backward_node(
        &self,
        i: usize,
        g: &DenseArray,
        grads: &mut [Option<DenseArray>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone())?;
                self.accum(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accum(grads, *a, g.zip_map(vb, |x, y| x * y)?)?;
                }
                if self.ng(*b) {
                    self.accum(grads, *b, g.zip_map(va, |x, y| x * y)?)?;
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mask_a = va.zip_map(vb, |x, y| if x >= y { 1.0 } else { 0.0 })?;
                self.accum(grads, *a, g.zip_map(&mask_a, |x, m| x * m)?)?;
                self.accum(grads, *b, g.zip_map(&mask_a, |x, m| x * (1.0 - m))?)?;
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|x| s * x))?,
            Op::AddConst(a) => self.accum(grads, *a, g.clone())?,
            Op::Tanh(a) => self.accum(grads, *a, g.zip_map(val, |x, y| x * (1.0 - y * y))?)?,
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |x, y| if y > 0.0 { x } else { 0.0 })?)?
            }
            Op::Exp(a) => self.accum(grads, *a, g.zip_map(val, |x, y| x * y)?)?,
            Op::Log(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |x, y| x / y)?)?
            }
            Op::Square(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, g.zip_map(va, |x, y| 2.0 * x * y)?)?
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                self.accum(
                    grads,
                    *a,
                    g.zip_map(va, |x, y| if y >= lo && y <= hi { x } else { 0.0 })?,
                )?
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accum(grads, *a, g.matmul(&vb.transpose())?)?;
                }
                if self.ng(*b) {
                    self.accum(grads, *b, va.transpose().matmul(g)?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone())?;
                if self.ng(*row) {
                    let m = g.cols();
                    let mut acc = vec![0.0; m];
                    for r in 0..g.rows() {
                        for (s, v) in acc.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    self.accum(grads, *row, DenseArray::new(shape, acc)?)?;
                }
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = vc.values()[r];
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    self.accum(grads, *a, ga)?;
                }
                if self.ng(*col) {
                    let vals = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accum(grads, *col, DenseArray::column(vals))?;
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accum(grads, *a, DenseArray::filled(&shape, s))?
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let mut ga = DenseArray::zeros(va.shape());
                for r in 0..va.rows() {
                    let s = g.values()[r];
                    for x in ga.row_mut(r) {
                        *x = s;
                    }
                }
                self.accum(grads, *a, ga)?
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let c = vp.cols();
                    if self.ng(*p) {
                        let mut gp = DenseArray::zeros(vp.shape());
                        for r in 0..vp.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        self.accum(grads, *p, gp)?;
                    }
                    offset += c;
                }
            }
            Op::Columns(a, j) => {
                let va = self.value(*a);
                let mut ga = DenseArray::zeros(va.shape());
                for r in 0..va.rows() {
                    ga.set(r, *j, g.values()[r]);
                }
                self.accum(grads, *a, ga)?
            }
            Op::GaussLogDensity { x, mean, var } => {
                let (vx, vm) = (self.value(*x), self.value(*mean));
                let mut gx = DenseArray::zeros(vx.shape());
                for r in 0..vx.rows() {
                    let s = g.values()[r] / var;
                    for ((o, a), b) in gx.row_mut(r).iter_mut().zip(vx.row(r)).zip(vm.row(r)) {
                        *o = -s * (a - b);
                    }
                }
                if self.ng(*mean) {
                    self.accum(grads, *mean, gx.map(|v| -v))?;
                }
                if self.ng(*x) {
                    self.accum(grads, *x, gx)?;
                }
            }
            Op::External { input, jac } => {
                let vi = self.value(*input);
                let (n, din, dout) = (vi.rows(), vi.cols(), val.cols());
                let mut gi = DenseArray::zeros(vi.shape());
                for r in 0..n {
                    let go = g.row(r);
                    let jr = &jac[r * dout * din..(r + 1) * dout * din];
                    let out = gi.row_mut(r);
                    for (o, gv) in go.iter().enumerate() {
                        for (k, slot) in out.iter_mut().enumerate() {
                            *slot += gv * jr[o * din + k];
                        }
                    }
                }
                self.accum(grads, *input, gi)?
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<DenseArray>], v: Var, g: DenseArray) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => {
                if g.len() != self.value(v).len() {
                    return Err(dim_err("gradient shape mismatch"));
                }
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let w = g.param(DenseArray::scalar(3.0));
        let y = g.square(w);
        let grads = g.gradient(y, &[w]).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn exp_derivative() {
        let mut g = Graph::new();
        let w = g.param(DenseArray::scalar(0.0));
        let y = g.exp(w);
        assert_eq!(g.gradient(y, &[w]).unwrap()[0].item(), 1.0);
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let mut g = Graph::new();
        let w = g.param(DenseArray::column(vec![1.0, 2.0]));
        let y = g.square(w);
        assert!(matches!(g.gradient(y, &[w]), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::new();
        let w = g.param(DenseArray::scalar(-1.0));
        let y = g.log(w);
        assert!(g.check().is_err());
        assert!(g.gradient(y, &[w]).is_err());
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let a = g.param(DenseArray::scalar(1.0));
        let b = g.constant(DenseArray::scalar(2.0));
        let c = g.mul(a, b);
        let d = g.tanh(c);
        for v in [c, d] {
            assert!(g.parents(v).iter().all(|p| *p < v.index()));
        }
    }

    #[test]
    fn external_uses_row_jacobian() {
        let mut g = Graph::new();
        let x = g.param(DenseArray::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        // f(x) = x^3 per row
        let out = DenseArray::column(vec![1.0, 8.0]);
        let y = g.external(x, out, vec![3.0, 12.0]);
        let s = g.sum(y);
        let gr = g.gradient(s, &[x]).unwrap();
        assert_eq!(gr[0].values(), &[3.0, 12.0]);
    }

    #[test]
    fn gaussian_log_density_at_mean() {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::scalar(0.4));
        let m = g.constant(DenseArray::scalar(0.4));
        let l = g.gaussian_log_density(x, m, 1.0);
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.value(l).item() - expect).abs() < 1e-15);
    }
}
