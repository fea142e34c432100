//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] only has to walk it in reverse. Graphs are cheap to
//! build and are meant to be discarded after one forward/backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative-branch slope of [`Graph::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    LeakyRelu(Var),
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    PairwiseDist(Var),
    Mask(Var, Tensor),
    Columns(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if a.is_matrix() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: vec![],
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).expect("matmul shape")
}

fn pairwise_dist_raw(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let xi = x.row(i);
        for j in (i + 1)..n {
            let xj = x.row(j);
            let mut acc = 0.0;
            for c in 0..d {
                let diff = xi[c] - xj[c];
                acc += diff * diff;
            }
            let dist = acc.sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }
    Tensor::matrix(n, n, out).expect("pairwise shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b) => self.nodes[a.0].tracked || self.nodes[b.0].tracked,
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::LeakyRelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowNorm(a)
            | Op::PairwiseDist(a)
            | Op::Mask(a, _)
            | Op::Columns(a, _) => self.nodes[a.0].tracked,
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input. Its gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Nodes that were not reached (or before any backward) report zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(g) if g.shape() == self.nodes[v.0].value.shape() => g.clone(),
            _ => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let out = matmul_raw(ta, tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Elementwise sum. `b` may also be a `[1, n]` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let out = zip_map(ta, tb, |x, y| x + y);
            return Ok(self.push(out, Op::Add(a, b)));
        }
        if ta.is_matrix() && tb.is_matrix() && tb.rows() == 1 && tb.cols() == ta.cols() {
            let cols = ta.cols();
            let mut out = ta.clone();
            let bias = tb.data().to_vec();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += bias[i % cols];
            }
            return Ok(self.push(out, Op::AddRow(a, b)));
        }
        Err(Error::Shape {
            op: "add",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product of two tracked or constant nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                left: self.value(a).shape().to_vec(),
                right: ts.shape().to_vec(),
            });
        }
        let k = ts.item();
        let out = self.value(a).map(|x| x * k);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    /// Multiplies every entry of `a` by a fixed constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Natural log; non-positive entries are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = ta.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "ln",
                value: bad,
            });
        }
        let out = ta.map(f64::ln);
        Ok(self.push(out, Op::Ln(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Square root; negative entries are a domain error. The derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = ta.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                value: bad,
            });
        }
        let out = ta.map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(a)))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// `x` for `x > 0`, `0.01 x` otherwise.
    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { LEAKY_RELU_SLOPE * x });
        self.push(out, Op::LeakyRelu(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Mean of all entries, as a scalar. The mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel();
        let m = if n == 0 { 0.0 } else { t.sum() / n as f64 };
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Euclidean norm of each row, as an `[m, 1]` column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("row_norm", ta)?;
        let data = (0..ta.rows())
            .map(|r| ta.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::matrix(ta.rows(), 1, data)?;
        Ok(self.push(out, Op::RowNorm(a)))
    }

    /// Euclidean distances between all pairs of rows, as an `[m, m]` matrix.
    pub fn pairwise_dist(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("pairwise_dist", ta)?;
        let out = pairwise_dist_raw(ta);
        Ok(self.push(out, Op::PairwiseDist(a)))
    }

    /// Hadamard product with a fixed mask.
    pub fn mask(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        same_shape("mask", ta, mask)?;
        let out = zip_map(ta, mask, |x, m| x * m);
        Ok(self.push(out, Op::Mask(a, mask.clone())))
    }

    /// Columns `start..end` of a matrix.
    pub fn columns(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        require_matrix("columns", ta)?;
        if start > end || end > ta.cols() {
            return Err(Error::Shape {
                op: "columns",
                left: ta.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = ta.select_columns(&idx);
        Ok(self.push(out, Op::Columns(a, start)))
    }

    /// Computes d`loss`/d`node` for every tracked node reachable from `loss`.
    ///
    /// Gradients from a previous call are discarded first. Nodes feeding several
    /// consumers accumulate every contribution.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![],
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.tracked {
                    Tensor::zeros(n.value.shape())
                } else {
                    Tensor::zeros(&[0])
                }
            })
            .collect();
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.grads[loss.0].data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let g = self.grads[i].clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: impl FnOnce(&Self) -> Tensor) {
        if !self.nodes[target.0].tracked {
            return;
        }
        let c = contrib(self);
        for (dst, src) in self.grads[target.0].data_mut().iter_mut().zip(c.data()) {
            *dst += src;
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        // Safe to read operands while writing grads: values are immutable.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |s| matmul_raw(g, &s.value(b).transpose()));
                self.accumulate(b, |s| matmul_raw(&s.value(a).transpose(), g));
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |_| g.clone());
                self.accumulate(*b, |_| g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(*a, |_| g.clone());
                self.accumulate(*b, |_| {
                    let cols = g.cols();
                    let mut out = vec![0.0; cols];
                    for (k, x) in g.data().iter().enumerate() {
                        out[k % cols] += x;
                    }
                    Tensor::matrix(1, cols, out).expect("bias grad")
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |_| g.clone());
                self.accumulate(*b, |_| g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |s| zip_map(g, s.value(b), |x, y| x * y));
                self.accumulate(b, |s| zip_map(g, s.value(a), |x, y| x * y));
            }
            Op::ScaleBy(a, s) => {
                let (a, s) = (*a, *s);
                let k = self.value(s).item();
                self.accumulate(a, |_| g.map(|x| x * k));
                self.accumulate(s, |gr| {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(gr.value(a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    Tensor::new(gr.value(s).shape().to_vec(), vec![dot]).expect("scalar")
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(*a, |_| g.map(|x| x * k));
            }
            Op::Neg(a) => self.accumulate(*a, |_| g.map(|x| -x)),
            Op::Exp(a) => {
                let out = &self.nodes[i].value;
                let c = zip_map(g, out, |x, y| x * y);
                self.accumulate(*a, |_| c);
            }
            Op::Ln(a) => self.accumulate(*a, |s| zip_map(g, s.value(*a), |x, y| x / y)),
            Op::Square(a) => self.accumulate(*a, |s| zip_map(g, s.value(*a), |x, y| 2.0 * x * y)),
            Op::Sqrt(a) => {
                let out = &self.nodes[i].value;
                let c = zip_map(g, out, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 });
                self.accumulate(*a, |_| c);
            }
            Op::Abs(a) => self.accumulate(*a, |s| {
                zip_map(g, s.value(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                })
            }),
            Op::LeakyRelu(a) => self.accumulate(*a, |s| {
                zip_map(g, s.value(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else {
                        LEAKY_RELU_SLOPE * x
                    }
                })
            }),
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(*a, |s| Tensor::full(s.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let gv = g.item();
                self.accumulate(*a, |s| {
                    let t = s.value(*a);
                    Tensor::full(t.shape(), gv / t.numel().max(1) as f64)
                });
            }
            Op::RowNorm(a) => {
                let norms = self.nodes[i].value.clone();
                self.accumulate(*a, |s| {
                    let x = s.value(*a);
                    let cols = x.cols();
                    let mut out = Tensor::zeros(x.shape());
                    for r in 0..x.rows() {
                        let n = norms.data()[r];
                        if n > 0.0 {
                            let k = g.data()[r] / n;
                            for c in 0..cols {
                                out.set(r, c, k * x.get(r, c));
                            }
                        }
                    }
                    out
                });
            }
            Op::PairwiseDist(a) => {
                let dist = self.nodes[i].value.clone();
                self.accumulate(*a, |s| {
                    let x = s.value(*a);
                    let (n, d) = (x.rows(), x.cols());
                    let mut out = vec![0.0; n * d];
                    for p in 0..n {
                        for q in (p + 1)..n {
                            let dpq = dist.data()[p * n + q];
                            if dpq <= 0.0 {
                                continue;
                            }
                            let w = (g.data()[p * n + q] + g.data()[q * n + p]) / dpq;
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                let diff = w * (x.data()[p * d + c] - x.data()[q * d + c]);
                                out[p * d + c] += diff;
                                out[q * d + c] -= diff;
                            }
                        }
                    }
                    Tensor::matrix(n, d, out).expect("pairwise grad")
                });
            }
            Op::Mask(a, m) => self.accumulate(*a, |_| zip_map(g, m, |x, y| x * y)),
            Op::Columns(a, start) => {
                let start = *start;
                self.accumulate(*a, |s| {
                    let x = s.value(*a);
                    let mut out = Tensor::zeros(x.shape());
                    let width = g.cols();
                    for r in 0..g.rows() {
                        for c in 0..width {
                            out.set(r, start + c, g.get(r, c));
                        }
                    }
                    out
                });
            }
        }
        self.nodes[i].op = op;
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` receives a fresh graph plus one leaf per entry of `params` and must
/// return a scalar loss node. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every parameter entry.
pub fn finite_difference_check<F>(mut build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(Error::Shape {
                op: "finite_difference_check",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for k in 0..params[p].numel() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[p].data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
