//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended to an arena as operations execute, so creation order is
//! a valid topological order and the graph is acyclic by construction.
//! [`Graph::backward`] walks the arena once in reverse and accumulates into
//! leaf gradients until [`Graph::zero_grad`] is called.

use super::{EngineError, Tensor};

/// Handle to a node in a [`Graph`].
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
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Relu(Var),
    Norm { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    LogSoftmax(Var),
    GatherRows { x: Var, rows: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), EngineError> {
    if a.shape() != b.shape() {
        return Err(EngineError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

// (m x k) . (k x n)
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// (m x k) . (n x k)^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, m, k, n)
}

// (k x m)^T . (k x n)
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, EngineError> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, or zeros when it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, rg)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, EngineError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Matrix product `a . b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a . b^T`; `b` is stored `[n x k]`, as dense layer weights are.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, EngineError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let name = if trans_b { "matmul_bt" } else { "matmul" };
        let mismatch = || EngineError::ShapeMismatch {
            op: name,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (bk, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != bk {
            return Err(mismatch());
        }
        let data = if trans_b {
            matmul_nt(ta.data(), tb.data(), m, k, n)
        } else {
            matmul_nn(ta.data(), tb.data(), m, k, n)
        };
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.binary(a, b, value, Op::MatMul { a, b, trans_b }))
    }

    /// Adds a `[n]` bias to every row of a `[m x n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, EngineError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(EngineError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tb.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.binary(x, bias, value, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(EngineError::Domain {
                op: "div",
                detail: "zero divisor".into(),
            });
        }
        let value = self.elementwise("div", a, b, |x, y| x / y)?;
        Ok(self.binary(a, b, value, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.unary(x, value, Op::Scale(x, factor))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, EngineError> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(EngineError::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(x).map(f64::sqrt);
        Ok(self.unary(x, value, Op::Sqrt(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, EngineError> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(EngineError::Domain {
                op: "ln",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.unary(x, value, Op::Ln(x)))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.unary(x, value, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    /// Euclidean norm along `axis`. Rank-1 inputs reduce to a scalar.
    pub fn norm(&mut self, x: Var, axis: usize) -> Result<Var, EngineError> {
        let t = self.value(x);
        let value = match (t.rank(), axis) {
            (1, 0) => Tensor::scalar(t.norm()),
            (2, 0) => {
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (a, v) in acc.iter_mut().zip(t.row(i)) {
                        *a += v * v;
                    }
                }
                Tensor::vector(acc.into_iter().map(f64::sqrt).collect())
            }
            (2, 1) => {
                let m = t.shape()[0];
                Tensor::vector(
                    (0..m)
                        .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                        .collect(),
                )
            }
            _ => {
                return Err(EngineError::ShapeMismatch {
                    op: "norm",
                    left: t.shape().to_vec(),
                    right: vec![axis],
                })
            }
        };
        Ok(self.unary(x, value, Op::Norm { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(x, value, Op::Mean(x))
    }

    /// Log-softmax over the last axis of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, EngineError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(EngineError::ShapeMismatch {
                op: "log_softmax",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.unary(x, value, Op::LogSoftmax(x)))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, EngineError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(EngineError::ShapeMismatch {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![rows.len()],
            });
        }
        let m = t.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(EngineError::Index {
                op: "gather_rows",
                index: bad,
                bound: m,
            });
        }
        let n = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.unary(
            x,
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(EngineError::NotScalar {
                op: "backward",
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Op::Leaf = op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in self.local_adjoints(i, &op, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => add_into(acc, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_adjoints(&self, i: usize, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = &self.nodes[i].value;
        let val = |v: Var| self.value(v).data();
        let zip_map = |a: &[f64], f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            a.iter().enumerate().map(|(j, &x)| f(j, x)).collect()
        };
        match *op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if trans_b {
                    // out = a . b^T with b [n x k]
                    let da = matmul_nn(g, tb.data(), m, n, k);
                    let db = matmul_tn(g, ta.data(), m, n, k);
                    vec![(a, da), (b, db)]
                } else {
                    let da = matmul_nt(g, tb.data(), m, n, k);
                    let db = matmul_tn(ta.data(), g, m, k, n);
                    vec![(a, da), (b, db)]
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.value(bias).len();
                let mut db = vec![0.0; n];
                for (j, gv) in g.iter().enumerate() {
                    db[j % n] += gv;
                }
                vec![(x, g.to_vec()), (bias, db)]
            }
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                vec![
                    (a, zip_map(g, &|j, gv| gv * vb[j])),
                    (b, zip_map(g, &|j, gv| gv * va[j])),
                ]
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                vec![
                    (a, zip_map(g, &|j, gv| gv / vb[j])),
                    (b, zip_map(g, &|j, gv| -gv * va[j] / (vb[j] * vb[j]))),
                ]
            }
            Op::Scale(x, f) => vec![(x, g.iter().map(|v| v * f).collect())],
            Op::Square(x) => {
                let vx = val(x);
                vec![(x, zip_map(g, &|j, gv| 2.0 * vx[j] * gv))]
            }
            Op::Sqrt(x) => {
                let vo = out.data();
                vec![(x, zip_map(g, &|j, gv| gv * 0.5 / vo[j]))]
            }
            Op::Exp(x) => {
                let vo = out.data();
                vec![(x, zip_map(g, &|j, gv| gv * vo[j]))]
            }
            Op::Ln(x) => {
                let vx = val(x);
                vec![(x, zip_map(g, &|j, gv| gv / vx[j]))]
            }
            Op::Softplus(x) => {
                let vx = val(x);
                vec![(x, zip_map(g, &|j, gv| gv * sigmoid(vx[j])))]
            }
            Op::Relu(x) => {
                let vx = val(x);
                vec![(x, zip_map(g, &|j, gv| if vx[j] > 0.0 { gv } else { 0.0 }))]
            }
            Op::Norm { x, axis } => {
                let tx = self.value(x);
                let norms = out.data();
                let safe = |nv: f64| if nv > 0.0 { 1.0 / nv } else { 0.0 };
                let dx = match (tx.rank(), axis) {
                    (1, _) => {
                        let s = g[0] * safe(norms[0]);
                        tx.data().iter().map(|v| v * s).collect()
                    }
                    (_, 0) => {
                        let n = tx.shape()[1];
                        tx.data()
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * g[j % n] * safe(norms[j % n]))
                            .collect()
                    }
                    _ => {
                        let n = tx.shape()[1];
                        tx.data()
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * g[j / n] * safe(norms[j / n]))
                            .collect()
                    }
                };
                vec![(x, dx)]
            }
            Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).len()])],
            Op::Mean(x) => {
                let n = self.value(x).len();
                vec![(x, vec![g[0] / n as f64; n])]
            }
            Op::LogSoftmax(x) => {
                let n = out.shape()[1];
                let mut dx = vec![0.0; g.len()];
                for (r, (grow, orow)) in g.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let gs: f64 = grow.iter().sum();
                    for c in 0..n {
                        dx[r * n + c] = grow[c] - orow[c].exp() * gs;
                    }
                }
                vec![(x, dx)]
            }
            Op::GatherRows { x, ref rows } => {
                let tx = self.value(x);
                let n = tx.shape()[1];
                let mut dx = vec![0.0; tx.len()];
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                }
                vec![(x, dx)]
            }
        }
    }
}
