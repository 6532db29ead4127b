use std::borrow::Cow;

use super::kernels::{self, dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Ln(Var),
    Pow(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    CumsumRows(Var),
    Weibull {
        shape_k: Var,
        scale: Var,
        amplitude: Var,
        grid: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Pow(..) => "pow",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Reshape(..) => "reshape",
            Op::CumsumRows(..) => "cumsum_rows",
            Op::Weibull { .. } => "weibull_profile",
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumer. Leaves may borrow parameter storage for the lifetime `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape of a leading-axis broadcast, plus whether the left operand is
/// the larger one.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, bool)> {
    if a == b {
        return Ok((a.to_vec(), true));
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok((a.to_vec(), true));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((b.to_vec(), false));
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { numel(shape) / cols };
    (rows, cols)
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Sum of `grad` over the broadcast (leading) copies of a `small`-sized operand.
fn reduce_leading(grad: &[f64], small: usize) -> Vec<f64> {
    if grad.len() == small {
        return grad.to_vec();
    }
    let mut out = vec![0.0; small];
    for chunk in grad.chunks_exact(small) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that does not take gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, false)
    }

    /// Owned leaf that takes gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, true)
    }

    /// Leaf borrowing parameter storage; takes gradients when `requires_grad`.
    pub fn param(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.values()),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, a_big) = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let value: Vec<f64> = if av.len() == bv.len() {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if a_big {
            av.iter()
                .zip(bv.iter().cycle())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            av.iter()
                .cycle()
                .zip(bv)
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let av = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        if exponent.fract() != 0.0 {
            if let Some(&base) = self.value(a).iter().find(|&&x| x < 0.0) {
                return Err(Error::PowDomain { base, exponent });
            }
        }
        Ok(self.unary(a, |x| x.powf(exponent), Op::Pow(a, exponent)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, kernels::softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = last_axis(self.shape(a));
        let av = self.value(a);
        let mut value = vec![0.0; av.len()];
        for r in 0..rows {
            let src = &av[r * cols..(r + 1) * cols];
            let dst = &mut value[r * cols..(r + 1) * cols];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with learned `gamma` and `beta`
    /// of the last-axis extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = last_axis(self.shape(x));
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized[r * cols + c] = n;
                value[r * cols + c] = n * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.iter().sum::<f64>() / av.len() as f64;
        let rg = self.rg(a);
        self.push(Vec::new(), vec![m], Op::Mean(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            value.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Slice { x, axis, start }, rg))
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "embedding index {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            value.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), dim],
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Running sum down the rows of a 2-D tensor: row `t` of the output is the
    /// sum of input rows `0..=t`.
    pub fn cumsum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "cumsum_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let cols = s[1];
        let mut value = self.value(x).to_vec();
        for r in 1..s[0] {
            let (done, rest) = value.split_at_mut(r * cols);
            let prev = &done[(r - 1) * cols..];
            for (c, p) in rest[..cols].iter_mut().zip(prev) {
                *c += p;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(s, value, Op::CumsumRows(x), rg))
    }

    /// `out[t, g] = amplitude[t] · exp(−(grid[g] / scale[t])^shape_k[t])`.
    ///
    /// `shape_k`, `scale` and `amplitude` are length-`T` vectors; the grid must
    /// be non-negative and the shape and scale strictly positive.
    pub fn weibull_profile(
        &mut self,
        shape_k: Var,
        scale: Var,
        amplitude: Var,
        grid: &[f64],
    ) -> Result<Var> {
        let t = self.shape(shape_k).to_vec();
        for v in [scale, amplitude] {
            if self.shape(v) != t.as_slice() || t.len() != 1 {
                return Err(Error::Shape {
                    op: "weibull_profile",
                    lhs: t,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        if grid.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("weibull_profile: grid must be non-negative"));
        }
        let (kv, lv, av) = (self.value(shape_k), self.value(scale), self.value(amplitude));
        if let Some(bad) = kv.iter().chain(lv).find(|&&p| p <= 0.0 || p.is_nan()) {
            return Err(Error::invalid(format!(
                "weibull_profile: shape and scale must be positive, got {bad}"
            )));
        }
        let steps = t[0];
        let g = grid.len();
        let mut value = vec![0.0; steps * g];
        for s in 0..steps {
            for (j, &x) in grid.iter().enumerate() {
                value[s * g + j] = av[s] * weibull_survival(x, kv[s], lv[s]);
            }
        }
        let rg = self.rg(shape_k) || self.rg(scale) || self.rg(amplitude);
        Ok(self.push(
            vec![steps, g],
            value,
            Op::Weibull {
                shape_k,
                scale,
                amplitude,
                grid: grid.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added into the
    /// accumulators of every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(grad) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[id];
                accumulate(&mut node.grad, &grad);
                continue;
            }
            self.propagate(id, &grad, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, grad: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, delta: &[f64]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut adj[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = reduce_leading(grad, self.value(*a).len());
                send(*a, &ga);
                let mut gb = reduce_leading(grad, self.value(*b).len());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                send(*b, &gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let full: Vec<f64> = grad
                        .iter()
                        .zip(bv.iter().cycle())
                        .map(|(g, y)| g * y)
                        .collect();
                    send(*a, &reduce_leading(&full, av.len()));
                }
                if self.rg(*b) {
                    let full: Vec<f64> = grad
                        .iter()
                        .zip(av.iter().cycle())
                        .map(|(g, x)| g * x)
                        .collect();
                    send(*b, &reduce_leading(&full, bv.len()));
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = grad.iter().map(|g| g * c).collect();
                send(*a, &d);
            }
            Op::AddScalar(a) => send(*a, grad),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(grad, self.value(*b), &mut da, m, k, n);
                    send(*a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(self.value(*a), grad, &mut db, m, k, n);
                    send(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = grad[j * r + i];
                    }
                }
                send(*a, &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = grad.iter().zip(out.iter()).map(|(g, y)| g * y).collect();
                send(*a, &d);
            }
            Op::Ln(a) => {
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| g / x)
                    .collect();
                send(*a, &d);
            }
            Op::Pow(a, p) => {
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| g * p * x.powf(p - 1.0))
                    .collect();
                send(*a, &d);
            }
            Op::Softplus(a) => {
                let d: Vec<f64> = grad
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, &x)| g * kernels::sigmoid(x))
                    .collect();
                send(*a, &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = grad
                    .iter()
                    .zip(out.iter())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                send(*a, &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = grad
                    .iter()
                    .zip(out.iter())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                send(*a, &d);
            }
            Op::Softmax(a) => {
                let (rows, cols) = last_axis(&node.shape);
                let mut d = vec![0.0; out.len()];
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &grad[r * cols..(r + 1) * cols];
                    let inner = dot(y, gy);
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gy[c] - inner);
                    }
                }
                send(*a, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = last_axis(&node.shape);
                let gv = self.value(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = grad[r * cols + c];
                            dg[c] += g * normalized[r * cols + c];
                            db[c] += g;
                        }
                    }
                    send(*gamma, &dg);
                    send(*beta, &db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; out.len()];
                    let inv_n = 1.0 / cols as f64;
                    for r in 0..rows {
                        let xhat = &normalized[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dxh = grad[r * cols + c] * gv[c];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for c in 0..cols {
                            let dxh = grad[r * cols + c] * gv[c];
                            dx[r * cols + c] = inv_std[r] * (dxh - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    send(*x, &dx);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, &vec![grad[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                send(*a, &vec![grad[0]; n]);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&grad[base..base + len]);
                        }
                        send(v, &d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let len = node.shape[*axis] * inner;
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    d[base..base + len].copy_from_slice(&grad[o * len..(o + 1) * len]);
                }
                send(*x, &d);
            }
            Op::Embedding { table, indices } => {
                let dim = self.shape(*table)[1];
                let mut d = vec![0.0; self.value(*table).len()];
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..dim {
                        d[i * dim + c] += grad[row * dim + c];
                    }
                }
                send(*table, &d);
            }
            Op::Reshape(x) => send(*x, grad),
            Op::CumsumRows(x) => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let mut d = grad.to_vec();
                for r in (0..rows.saturating_sub(1)).rev() {
                    let (head, tail) = d.split_at_mut((r + 1) * cols);
                    for (h, t) in head[r * cols..].iter_mut().zip(&tail[..cols]) {
                        *h += t;
                    }
                }
                send(*x, &d);
            }
            Op::Weibull {
                shape_k,
                scale,
                amplitude,
                grid,
            } => {
                let (kv, lv, av) = (
                    self.value(*shape_k),
                    self.value(*scale),
                    self.value(*amplitude),
                );
                let g = grid.len();
                let steps = kv.len();
                let mut dk = vec![0.0; steps];
                let mut dl = vec![0.0; steps];
                let mut da = vec![0.0; steps];
                for s in 0..steps {
                    for (j, &x) in grid.iter().enumerate() {
                        let gr = grad[s * g + j];
                        if x == 0.0 {
                            da[s] += gr;
                            continue;
                        }
                        let ratio = x / lv[s];
                        let z = ratio.powf(kv[s]);
                        let w = (-z).exp();
                        da[s] += gr * w;
                        dk[s] -= gr * av[s] * w * z * ratio.ln();
                        dl[s] += gr * av[s] * w * z * kv[s] / lv[s];
                    }
                }
                send(*shape_k, &dk);
                send(*scale, &dl);
                send(*amplitude, &da);
            }
        }
    }
}

/// `exp(−(x/λ)^k)` with the `x = 0` limit taken exactly.
#[inline]
pub fn weibull_survival(x: f64, k: f64, lambda: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (-(x / lambda).powf(k)).exp()
    }
}
