//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order of the graph and the backward sweep is a single reverse
//! pass. A tape lives for one forward/backward pass and is then dropped.

use crate::diff::kernels::{axpy, dot};
use crate::diff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Negate,
    Square,
    Exp,
    Log,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    SoftThreshold(Var, f64),
    Clamp(Var, f64, f64),
    Scale(Var, f64),
    Reduce(ReduceKind, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation graph for a single pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_checked(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        values: Vec<f64>,
        name: &'static str,
    ) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) => self.needs(*a) || self.needs(*b),
            Op::Linear { x, w, b } => self.needs(*x) || self.needs(*w) || self.needs(*b),
            Op::Unary(_, a)
            | Op::SoftThreshold(a, _)
            | Op::Clamp(a, _, _)
            | Op::Scale(a, _)
            | Op::Reduce(_, a) => self.needs(*a),
        };
        Ok(self.push(op, Tensor::from_parts(shape, values), requires_grad))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(av[i * k + p], &bv[p * n..(p + 1) * n], row);
            }
        }
        self.push_checked(Op::MatMul(a, b), vec![m, n], out, "matmul")
    }

    /// Affine layer on a batch of rows: `x · wᵀ + b` with `w` stored `[out, in]`
    /// and `b` of shape `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.matrix_dims(x, "linear")?;
        let (dout, din2) = self.matrix_dims(w, "linear")?;
        if din != din2 {
            return Err(Error::Shape {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [dout] {
            return Err(Error::Shape {
                op: "linear bias",
                left: self.shape(b).to_vec(),
                right: vec![dout],
            });
        }
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xi = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                out[i * dout + o] = bv[o] + dot(xi, &wv[o * din..(o + 1) * din]);
            }
        }
        self.push_checked(Op::Linear { x, w, b }, vec![n, dout], out, "linear")
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let av = self.value(a).values();
        let out: Vec<f64> = match kind {
            UnaryKind::Negate => av.iter().map(|v| -v).collect(),
            UnaryKind::Square => av.iter().map(|v| v * v).collect(),
            UnaryKind::Exp => av.iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(bad) = av.iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive operand {bad}"),
                    });
                }
                av.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Relu => av.iter().map(|v| v.max(0.0)).collect(),
        };
        let shape = self.shape(a).to_vec();
        self.push_checked(Op::Unary(kind, a), shape, out, "elementwise")
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "elementwise",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let out = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(Op::Binary(kind, a, b), shape, out, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Negate, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    /// Elementwise `sign(u)·(|u| − alpha)₊`.
    pub fn soft_threshold(&mut self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Parameter(format!(
                "soft-threshold alpha must be finite and >= 0, got {alpha}"
            )));
        }
        let out = self
            .value(a)
            .values()
            .iter()
            .map(|&u| soft_threshold(u, alpha))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(Op::SoftThreshold(a, alpha), shape, out, "soft_threshold")
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self
            .value(a)
            .values()
            .iter()
            .map(|u| u.clamp(lo, hi))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(Op::Clamp(a, lo, hi), shape, out, "clamp")
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).values().iter().map(|u| u * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(Op::Scale(a, c), shape, out, "scale")
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var) -> Result<Var> {
        let vals = self.value(a).values();
        let s: f64 = vals.iter().sum();
        let out = match kind {
            ReduceKind::Sum => s,
            ReduceKind::Mean => {
                if vals.is_empty() {
                    return Err(Error::Domain {
                        op: "mean",
                        detail: "empty tensor".into(),
                    });
                }
                s / vals.len() as f64
            }
        };
        self.push_checked(Op::Reduce(kind, a), vec![1], vec![out], "reduce")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let adjoints = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, n)| a.map(|v| Tensor::from_parts(n.value.shape().to_vec(), v)))
            .collect();
        Ok(Gradients { adjoints })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let av = self.value(a).values();
                let bv = self.value(b).values();
                if self.needs(a) {
                    let da = slot(adj, a, m * k);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(gi, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.needs(b) {
                    let db = slot(adj, b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av[i * k + p], gi, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(x)[0], self.shape(x)[1]);
                let dout = self.shape(w)[0];
                let xv = self.value(x).values();
                let wv = self.value(w).values();
                if self.needs(x) {
                    let dx = slot(adj, x, n * din);
                    for i in 0..n {
                        let dxi = &mut dx[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            if go != 0.0 {
                                axpy(go, &wv[o * din..(o + 1) * din], dxi);
                            }
                        }
                    }
                }
                if self.needs(w) {
                    let dw = slot(adj, w, dout * din);
                    for i in 0..n {
                        let xi = &xv[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            if go != 0.0 {
                                axpy(go, xi, &mut dw[o * din..(o + 1) * din]);
                            }
                        }
                    }
                }
                if self.needs(b) {
                    let db = slot(adj, b, dout);
                    for i in 0..n {
                        for o in 0..dout {
                            db[o] += g[i * dout + o];
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                let av = self.value(a).values();
                let ov = out.values();
                let da = slot(adj, a, av.len());
                match kind {
                    UnaryKind::Negate => da.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi),
                    UnaryKind::Square => {
                        for i in 0..av.len() {
                            da[i] += 2.0 * av[i] * g[i];
                        }
                    }
                    UnaryKind::Exp => {
                        for i in 0..av.len() {
                            da[i] += ov[i] * g[i];
                        }
                    }
                    UnaryKind::Log => {
                        for i in 0..av.len() {
                            da[i] += g[i] / av[i];
                        }
                    }
                    UnaryKind::Relu => {
                        for i in 0..av.len() {
                            if av[i] > 0.0 {
                                da[i] += g[i];
                            }
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let len = g.len();
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        if self.needs(a) {
                            let da = slot(adj, a, len);
                            da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                        }
                        if self.needs(b) {
                            let db = slot(adj, b, len);
                            if kind == BinaryKind::Add {
                                db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                            } else {
                                db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                            }
                        }
                    }
                    BinaryKind::Mul => {
                        if self.needs(a) {
                            let bv = self.value(b).values();
                            let da = slot(adj, a, len);
                            for i in 0..len {
                                da[i] += g[i] * bv[i];
                            }
                        }
                        if self.needs(b) {
                            let av = self.value(a).values();
                            let db = slot(adj, b, len);
                            for i in 0..len {
                                db[i] += g[i] * av[i];
                            }
                        }
                    }
                }
            }
            Op::SoftThreshold(a, alpha) => {
                let av = self.value(a).values();
                let da = slot(adj, a, av.len());
                for i in 0..av.len() {
                    if av[i].abs() > alpha {
                        da[i] += g[i];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(a).values();
                let da = slot(adj, a, av.len());
                for i in 0..av.len() {
                    if av[i] >= lo && av[i] <= hi {
                        da[i] += g[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = slot(adj, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
            }
            Op::Reduce(kind, a) => {
                let len = self.value(a).len();
                let s = match kind {
                    ReduceKind::Sum => g[0],
                    ReduceKind::Mean => g[0] / len as f64,
                };
                let da = slot(adj, a, len);
                da.iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Scalar soft-threshold `sign(u)·(|u| − alpha)₊`.
pub fn soft_threshold(u: f64, alpha: f64) -> f64 {
    if u > alpha {
        u - alpha
    } else if u < -alpha {
        u + alpha
    } else {
        0.0
    }
}

/// Derivative of [`soft_threshold`]; zero on the closed dead zone `|u| <= alpha`.
pub fn soft_threshold_slope(u: f64, alpha: f64) -> f64 {
    if u.abs() > alpha {
        1.0
    } else {
        0.0
    }
}

/// Adjoints from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when no path from `v` reaches the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, materialising zeros where no path exists.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let a = t.constant(m(2, 2, &[1., 2., 3., 4.]));
        let p = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(p).values(), &[1., 2., 3., 4.]);

        let r = t.constant(m(1, 2, &[1., 2.]));
        let c = t.constant(m(2, 1, &[3., 4.]));
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.value(p).values(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_matmul_is_column_sums_broadcast() {
        let mut t = Tape::new();
        let a = t.param(m(2, 3, &[1., -2., 0.5, 3., 1., 2.]));
        let b = t.constant(m(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let p = t.matmul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        // d sum(AB)/dA_ik = sum_j B_kj, identical for every row i
        let ga = g.get(a).unwrap();
        for i in 0..2 {
            assert_eq!(ga.row(i), &[3., 7., 11.]);
        }
    }

    #[test]
    fn soft_threshold_values_and_dead_zone() {
        assert!((soft_threshold(1.2, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-1.0, 0.5), -0.5);
        assert_eq!(soft_threshold(0.999_999, 1.0), 0.0);
        assert_eq!(soft_threshold_slope(0.999_999, 1.0), 0.0);
        assert_eq!(soft_threshold_slope(1.0, 1.0), 0.0);
        for u in [-3.0, -0.1, 0.0, 0.4, 7.0] {
            assert_eq!(soft_threshold(u, 0.0), u);
        }
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1.0));
        assert!(t.soft_threshold(a, -0.1).is_err());
    }

    #[test]
    fn elementwise_rules() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let e = t.exp(x).unwrap();
        let g = t.backward(e).unwrap();
        assert_eq!(t.value(e).item(), 1.0);
        assert_eq!(g.get(x).unwrap().item(), 1.0);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let s = t.square(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(t.value(s).item(), 9.0);
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(-2.0));
        let r = t.relu(x).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(t.value(r).item(), 0.0);
        assert_eq!(g.get(x).unwrap().item(), 0.0);

        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let r = t.relu(x).unwrap();
        assert_eq!(t.backward(r).unwrap().get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn log_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1., 2., 3.]).unwrap());
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).item(), 6.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[1., 1., 1.]);

        let c = t.constant(Tensor::filled(&[2, 2], 2.5));
        let mn = t.mean(c).unwrap();
        assert_eq!(t.value(mn).item(), 2.5);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_w_times_z_gradients() {
        // loss = sum(W z), W [2,3], z [3,1]
        let mut t = Tape::new();
        let w = t.param(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let z = t.param(m(3, 1, &[0.5, -1., 2.]));
        let p = t.matmul(w, z).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        // grad_W = 1 zᵀ (outer product), grad_z = column sums of W
        assert_eq!(g.get(w).unwrap().values(), &[0.5, -1., 2., 0.5, -1., 2.]);
        assert_eq!(g.get(z).unwrap().values(), &[5., 7., 9.]);
    }

    #[test]
    fn linear_matches_matmul_route() {
        let x = m(3, 2, &[1., 2., -1., 0.5, 0., 3.]);
        let w = m(4, 2, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6, -0.7, 0.8]);
        let b = Tensor::vector(vec![0.0; 4]).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.constant(w.clone());
        let bv = t.constant(b);
        let l = t.linear(xv, wv, bv).unwrap();
        let wt = t.constant(w.transpose());
        let mm = t.matmul(xv, wt).unwrap();
        for (a, b) in t.value(l).values().iter().zip(t.value(mm).values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
