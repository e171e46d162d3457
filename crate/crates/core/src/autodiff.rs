//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] owns its nodes; a [`Var`] is a cheap handle into it. Nodes
//! only ever reference nodes created before them, so the graph is acyclic
//! and walking indices downwards from the loss is a valid reverse
//! topological order.
//!
//! Gradients accumulate additively. Calling [`Graph::backward`] twice
//! without [`Graph::zero_gradients`] in between sums both passes.

use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    LogSoftmax { x: Var },
    Reduce { x: Var, how: Reduction },
    RowSum { x: Var },
    Gather { x: Var, cols: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Offset { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Square { x: Var },
    ClippedSurrogate { ratio: Var, advantages: Vec<f64>, eps: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Arena of nodes for one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Option<Execution>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose large matrix products may be split across workers.
    /// Results are bit-identical to the sequential graph.
    pub fn with_execution(exec: Execution) -> Self {
        Self {
            nodes: Vec::new(),
            exec: Some(exec),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn parameter(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, or `None` if backward never reached the node.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient, zero-filled if backward never reached the node.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()))
    }

    pub fn zero_gradients(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `x · w + b`, with `b` a `1 x O` row broadcast over the `N` rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(shape_err(
                "linear",
                format!("bias {:?} for weight {:?}", bv.shape(), wv.shape()),
            ));
        }
        let mut out = xv.matmul_with(wv, self.exec.unwrap_or(Execution::Sequential))?;
        let bias = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let rg = self.needs(&[x]);
        self.push(out, Op::Activation { x, kind }, rg)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::LogSoftmax { x }, rg)
    }

    pub fn reduce(&mut self, x: Var, how: Reduction) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Empty("reduce"));
        }
        let s = match how {
            Reduction::Sum => xv.sum(),
            Reduction::Mean => xv.mean(),
        };
        let rg = self.needs(&[x]);
        Ok(self.push(Matrix::scalar(s), Op::Reduce { x, how }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Mean)
    }

    /// Sums each row, giving `N x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let rg = self.needs(&[x]);
        self.push(Matrix::column_vector(&sums), Op::RowSum { x }, rg)
    }

    /// Picks column `cols[r]` from row `r`, giving `N x 1`.
    pub fn gather(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if cols.len() != xv.rows() || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(shape_err("gather", "index list does not fit the matrix"));
        }
        let picked: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Matrix::column_vector(&picked),
            Op::Gather {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| shape_err(name, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, k }, rg)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Offset { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.needs(&[x]);
        self.push(out, Op::Exp { x }, rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.needs(&[x]);
        self.push(out, Op::Log { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.needs(&[x]);
        self.push(out, Op::Square { x }, rg)
    }

    /// Per-sample `min(ρΨ, clip(ρ, 1−ε, 1+ε)Ψ)` for an `N x 1` ratio column.
    ///
    /// The gradient with respect to `ρ` is exactly zero when
    /// `Ψ > 0 ∧ ρ ≥ 1+ε` or `Ψ < 0 ∧ ρ ≤ 1−ε`, and `Ψ` otherwise.
    pub fn clipped_surrogate(&mut self, ratio: Var, advantages: &[f64], eps: f64) -> Result<Var> {
        let rv = self.value(ratio);
        if rv.cols() != 1 || rv.rows() != advantages.len() {
            return Err(shape_err(
                "clipped_surrogate",
                format!("ratio {:?} vs {} advantages", rv.shape(), advantages.len()),
            ));
        }
        let vals: Vec<f64> = rv
            .data()
            .iter()
            .zip(advantages)
            .map(|(&r, &a)| {
                let clipped = r.clamp(1.0 - eps, 1.0 + eps);
                (r * a).min(clipped * a)
            })
            .collect();
        let rg = self.needs(&[ratio]);
        Ok(self.push(
            Matrix::column_vector(&vals),
            Op::ClippedSurrogate {
                ratio,
                advantages: advantages.to_vec(),
                eps,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            None => node.grad = Some(g),
        }
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("seed must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            for p in parents(&self.nodes[i].op) {
                reachable[p.0] = true;
            }
        }

        // The seed lives outside the accumulated gradients so that repeated
        // calls sum cleanly.
        let mut pending: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = pending[i].take() else {
                continue;
            };
            let contributions = self.local_backward(i, &dy)?;
            self.accumulate(Var(i), dy);
            for (p, g) in contributions {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut pending[p.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, dy: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let mut g = Vec::with_capacity(3);
                if self.nodes[x.0].requires_grad {
                    g.push((*x, dy.matmul_t(val(*w))?));
                }
                if self.nodes[w.0].requires_grad {
                    g.push((*w, val(*x).t_matmul(dy)?));
                }
                if self.nodes[b.0].requires_grad {
                    g.push((*b, dy.column_sums()));
                }
                g
            }
            Op::Activation { x, kind } => {
                let xv = val(*x);
                let mut d = dy.clone();
                for ((g, &xi), &yi) in d.data_mut().iter_mut().zip(xv.data()).zip(node.value.data()) {
                    *g *= kind.derivative(xi, yi);
                }
                vec![(*x, d)]
            }
            Op::LogSoftmax { x } => {
                let y = &node.value;
                let mut d = dy.clone();
                for r in 0..d.rows() {
                    let total: f64 = dy.row(r).iter().sum();
                    for (g, &lp) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *g -= lp.exp() * total;
                    }
                }
                vec![(*x, d)]
            }
            Op::Reduce { x, how } => {
                let xv = val(*x);
                let s = dy.get(0, 0);
                let g = match how {
                    Reduction::Sum => s,
                    Reduction::Mean => s / xv.len() as f64,
                };
                vec![(*x, Matrix::filled(xv.rows(), xv.cols(), g))]
            }
            Op::RowSum { x } => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let g = dy.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v = g);
                }
                vec![(*x, d)]
            }
            Op::Gather { x, cols } => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &c) in cols.iter().enumerate() {
                    d.set(r, c, dy.get(r, 0));
                }
                vec![(*x, d)]
            }
            Op::Add { a, b } => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub { a, b } => vec![(*a, dy.clone()), (*b, dy.scale(-1.0))],
            Op::Mul { a, b } => vec![
                (*a, dy.zip_map(val(*b), |g, y| g * y)?),
                (*b, dy.zip_map(val(*a), |g, x| g * x)?),
            ],
            Op::Div { a, b } => {
                let bv = val(*b);
                let da = dy.zip_map(bv, |g, y| g / y)?;
                let db = da.zip_map(&node.value, |ga, q| -ga * q)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, k } => vec![(*x, dy.scale(*k))],
            Op::Offset { x } => vec![(*x, dy.clone())],
            Op::Exp { x } => vec![(*x, dy.zip_map(&node.value, |g, y| g * y)?)],
            Op::Log { x } => vec![(*x, dy.zip_map(val(*x), |g, v| g / v)?)],
            Op::Square { x } => vec![(*x, dy.zip_map(val(*x), |g, v| 2.0 * g * v)?)],
            Op::ClippedSurrogate {
                ratio,
                advantages,
                eps,
            } => {
                let rv = val(*ratio);
                let d: Vec<f64> = rv
                    .data()
                    .iter()
                    .zip(advantages)
                    .zip(dy.data())
                    .map(|((&r, &a), &g)| if surrogate_is_clipped(r, a, *eps) { 0.0 } else { g * a })
                    .collect();
                vec![(*ratio, Matrix::column_vector(&d))]
            }
        };
        Ok(out)
    }
}

/// Whether the clipped branch is active and flat for one sample.
pub fn surrogate_is_clipped(ratio: f64, advantage: f64, eps: f64) -> bool {
    (advantage > 0.0 && ratio >= 1.0 + eps) || (advantage < 0.0 && ratio <= 1.0 - eps)
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::Activation { x, .. }
        | Op::LogSoftmax { x }
        | Op::Reduce { x, .. }
        | Op::RowSum { x }
        | Op::Gather { x, .. }
        | Op::Scale { x, .. }
        | Op::Offset { x }
        | Op::Exp { x }
        | Op::Log { x }
        | Op::Square { x } => vec![*x],
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => vec![*a, *b],
        Op::ClippedSurrogate { ratio, .. } => vec![*ratio],
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Named trainable leaves of one graph.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Var)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, var));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Gradients in insertion order; unreached leaves report zeros.
    pub fn gradients(&self, graph: &Graph) -> Vec<Matrix> {
        self.entries.iter().map(|(_, v)| graph.grad_or_zeros(*v)).collect()
    }

    /// All gradients concatenated in insertion order.
    pub fn flat_gradient(&self, graph: &Graph) -> Vec<f64> {
        self.gradients(graph).into_iter().flat_map(Matrix::into_vec).collect()
    }
}

/// Central finite differences `(f(p+h) − f(p−h)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
