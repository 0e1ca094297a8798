use std::sync::Arc;

use super::kernels::{gemm, Transpose};
use super::{broadcast_kind, Broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2 / pi), for the tanh form of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Gelu,
    Silu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: Transpose,
        tb: Transpose,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnaryKind, Var),
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        a: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    Reshape(Var),
    Permute {
        a: Var,
        index: Arc<Vec<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients. Node ids are assigned in push order, so every
/// node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only kept for leaves created with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad shape matches value"))
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs(&op).iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(
                !inputs_finite,
                "non-finite output from {op:?} on finite inputs"
            );
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let rg = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, rg, op)
    }

    fn mat_dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn gemm_op(&mut self, a: Var, b: Var, ta: Transpose, tb: Transpose) -> Result<Var> {
        let (ar, ac) = self.mat_dims(a)?;
        let (br, bc) = self.mat_dims(b)?;
        let (m, k) = if ta == Transpose::No { (ar, ac) } else { (ac, ar) };
        let (k2, n) = if tb == Transpose::No { (br, bc) } else { (bc, br) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb, m, k, n }))
    }

    /// `a · b` for matrices `m × k` and `k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, b, Transpose::No, Transpose::No)
    }

    /// `a · bᵀ` for `a: m × k`, `b: n × k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, b, Transpose::No, Transpose::Yes)
    }

    /// `x · wᵀ + bias` with `w: out × in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a)?;
        let value = self.value(a).transpose()?;
        let index: Vec<usize> = (0..r * c).map(|o| (o % r) * c + o / r).collect();
        Ok(self.push(
            value,
            Op::Permute {
                a,
                index: Arc::new(index),
            },
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bc = broadcast_kind(&sa, &sb)?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (shape, data): (Vec<usize>, Vec<f64>) = match bc {
            Broadcast::Same => (sa, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
            Broadcast::Rhs => {
                let w = db.len();
                (
                    sa,
                    da.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, db[i % w]))
                        .collect(),
                )
            }
            Broadcast::Lhs => {
                let w = da.len();
                (
                    sb,
                    db.iter()
                        .enumerate()
                        .map(|(i, &y)| f(da[i % w], y))
                        .collect(),
                )
            }
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bc }))
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = self.value(a).map(|x| unary_fwd(kind, x));
        self.push(value, Op::Unary(kind, a))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes over the last axis, then applies optional gain and bias.
    pub fn layernorm(
        &mut self,
        a: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().expect("non-empty shape");
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != width {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let x = self.value(a).data();
        let rows = x.len() / width;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (j, v) in row.iter().enumerate() {
                xhat[r * width + j] = (v - mean) * s;
            }
        }
        let mut y = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for (i, v) in y.iter_mut().enumerate() {
                *v *= g[i % width];
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for (i, v) in y.iter_mut().enumerate() {
                *v += b[i % width];
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a))
    }

    /// Rows of a `[vocab, d]` table selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat_dims(table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, cols) = self.mat_dims(parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat_dims(p)?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(a)?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidShape {
                shape: vec![r, c],
                reason: format!("row slice {start}..{} out of range", start + len),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (rows, _) = self.mat_dims(parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p)?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(a)?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                shape: vec![r, c],
                reason: format!("column slice {start}..{} out of range", start + len),
            });
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols { a, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `out[i] = a[index[i]]` with output shape `shape`; `index` must be a
    /// permutation of `0..numel`.
    pub fn permute(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if index.len() != x.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("permutation of length {} for {} elements", index.len(), x.len()),
            });
        }
        let data = index.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Permute { a, index }))
    }

    /// Populates gradients of every `requires_grad` leaf with respect to the
    /// scalar `loss`. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![],
                reason: "backward on an empty tape".into(),
            });
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[id].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, id, &dy);
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Unary(_, a)
        | Op::Softmax { a, .. }
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SliceRows { a, .. }
        | Op::SliceCols { a, .. }
        | Op::Reshape(a)
        | Op::Permute { a, .. } => vec![*a],
        Op::LayerNorm { a, gain, bias, .. } => {
            let mut v = vec![*a];
            v.extend(gain.iter().chain(bias.iter()).copied());
            v
        }
        Op::GatherRows { table, .. } => vec![*table],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
    }
}

fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        UnaryKind::Silu => x / (1.0 + (-x).exp()),
        UnaryKind::Tanh => x.tanh(),
    }
}

fn unary_grad(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Gelu => {
            let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        UnaryKind::Silu => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        }
        UnaryKind::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
    }
}

fn flip(t: Transpose) -> Transpose {
    match t {
        Transpose::No => Transpose::Yes,
        Transpose::Yes => Transpose::No,
    }
}

/// Gradient buffer for `v`, created on first use, or `None` when `v` does
/// not participate in differentiation.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, dy: &[f64]) {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            ta,
            tb,
            m,
            k,
            n,
        } => {
            if let Some(ga) = slot(nodes, grads, a) {
                match ta {
                    Transpose::No => gemm(m, n, k, dy, Transpose::No, val(b), flip(tb), ga, true),
                    Transpose::Yes => gemm(k, n, m, val(b), tb, dy, Transpose::Yes, ga, true),
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                match tb {
                    Transpose::No => gemm(k, m, n, val(a), flip(ta), dy, Transpose::No, gb, true),
                    Transpose::Yes => gemm(n, m, k, dy, Transpose::Yes, val(a), ta, gb, true),
                }
            }
        }
        &Op::Binary { kind, a, b, bc } => {
            let (xa, xb) = (val(a), val(b));
            let (wa, wb) = (xa.len(), xb.len());
            // index into each operand for output element i
            let ia = |i: usize| if bc == Broadcast::Lhs { i % wa } else { i };
            let ib = |i: usize| if bc == Broadcast::Rhs { i % wb } else { i };
            if let Some(ga) = slot(nodes, grads, a) {
                for (i, &d) in dy.iter().enumerate() {
                    ga[ia(i)] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => d,
                        BinaryKind::Mul => d * xb[ib(i)],
                    };
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for (i, &d) in dy.iter().enumerate() {
                    gb[ib(i)] += match kind {
                        BinaryKind::Add => d,
                        BinaryKind::Sub => -d,
                        BinaryKind::Mul => d * xa[ia(i)],
                    };
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        &Op::Unary(kind, a) => {
            let x = val(a);
            if let Some(ga) = slot(nodes, grads, a) {
                for ((g, d), &xi) in ga.iter_mut().zip(dy).zip(x) {
                    *g += d * unary_grad(kind, xi);
                }
            }
        }
        &Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            if let Some(ga) = slot(nodes, grads, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let width = *node.value.shape().last().expect("shape");
            let rows = rstd.len();
            if let Some(b) = *bias {
                if let Some(gb) = slot(nodes, grads, b) {
                    for (i, d) in dy.iter().enumerate() {
                        gb[i % width] += d;
                    }
                }
            }
            if let Some(g) = *gain {
                if let Some(gg) = slot(nodes, grads, g) {
                    for (i, d) in dy.iter().enumerate() {
                        gg[i % width] += d * xhat[i];
                    }
                }
            }
            let gain_val = gain.map(val);
            if let Some(ga) = slot(nodes, grads, *a) {
                let n = width as f64;
                let mut dxhat = vec![0.0; width];
                for r in 0..rows {
                    let off = r * width;
                    for j in 0..width {
                        dxhat[j] = dy[off + j] * gain_val.map_or(1.0, |g| g[j]);
                    }
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = (0..width).map(|j| dxhat[j] * xhat[off + j]).sum();
                    for j in 0..width {
                        ga[off + j] += rstd[r] / n * (n * dxhat[j] - s1 - xhat[off + j] * s2);
                    }
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, a) {
                let s = dy[0] / ga.len() as f64;
                ga.iter_mut().for_each(|g| *g += s);
            }
        }
        Op::GatherRows { table, ids } => {
            let d = node.value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += dy[r * d + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = slot(nodes, grads, p) {
                    gp.iter_mut()
                        .zip(&dy[off..off + len])
                        .for_each(|(g, d)| *g += d);
                }
                off += len;
            }
        }
        &Op::SliceRows { a, start } => {
            let c = node.value.shape()[1];
            if let Some(ga) = slot(nodes, grads, a) {
                ga[start * c..start * c + dy.len()]
                    .iter_mut()
                    .zip(dy)
                    .for_each(|(g, d)| *g += d);
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut col = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape()[1];
                if let Some(gp) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += dy[r * total + col + j];
                        }
                    }
                }
                col += w;
            }
        }
        &Op::SliceCols { a, start } => {
            let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
            let c = nodes[a.0].value.shape()[1];
            if let Some(ga) = slot(nodes, grads, a) {
                for i in 0..r {
                    for j in 0..len {
                        ga[i * c + start + j] += dy[i * len + j];
                    }
                }
            }
        }
        Op::Permute { a, index } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (o, &i) in index.iter().enumerate() {
                    ga[i] += dy[o];
                }
            }
        }
    }
}
