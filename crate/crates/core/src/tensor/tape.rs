//! Define-by-run computation tape.
//!
//! Every operation appends a node holding its output value and enough cached
//! state to run its backward rule. Nodes are only ever appended, so the node
//! vector is already in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    /// `b` broadcasts along the trailing axes of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sin(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Rope {
        x: Var,
        head_dim: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Sin(..) => "sin",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Rope { .. } => "rope",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
    grad: Option<Vec<T>>,
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_leaf(tensor, requires_grad, None)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_leaf(tensor, false, None)
    }

    /// Records a trainable parameter tagged with its index in a parameter store.
    pub fn param(&mut self, tensor: &Tensor<T>, index: usize) -> Var {
        self.push_leaf(tensor.clone(), true, Some(index))
    }

    fn push_leaf(&mut self, mut tensor: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
            param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// `(store index, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] · [{k2},{n}]")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m},{k}] · [{n},{k2}]ᵀ")));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), &[a, b])
    }

    fn check_broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let sa = self.shape(a);
        let sb = strip_leading_ones(self.shape(b));
        let sa_tail = &sa[sa.len().saturating_sub(sb.len())..];
        if sb.len() > sa.len() || sa_tail != sb {
            return Err(Error::dim(op, format!("cannot broadcast {:?} onto {sa:?}", self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.name();
        self.check_broadcast(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let n = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % n]))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        let out = self.value(x).scale(alpha);
        self.push(out, Op::Scale(x, alpha), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.sin());
        self.push(out, Op::Sin(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let d = self.value(x).last_dim();
        for (p, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(p).len() != d {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} has {} elements, rows have {d}", self.value(p).len()),
                ));
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let dn = T::from_usize(d).expect("d fits");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let (_, cols) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(&[len, cols], data)?;
        self.push(out, Op::SliceRows(x, start), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::dim("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        self.push(out, Op::SliceCols(x, start), &[x])
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::dim("gather_rows", "no indices"));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("index {i} out of {rows} rows")));
            }
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(&[indices.len(), cols], data)?;
        self.push(out, Op::GatherRows(table, indices.to_vec()), &[table])
    }

    /// Rotary position embedding over the first axis.
    ///
    /// `x` is `[seq, ...]` with the trailing elements of each row split into
    /// heads of `head_dim`; consecutive pairs inside a head are rotated by
    /// `pos · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope head_dim must be even, got {head_dim}")));
        }
        let shape = self.shape(x).to_vec();
        let seq = shape[0];
        let width = self.value(x).len() / seq;
        if !width.is_multiple_of(head_dim) {
            return Err(Error::dim("rope", format!("row width {width} not a multiple of {head_dim}")));
        }
        if positions.len() != seq {
            return Err(Error::dim("rope", format!("{} positions for {seq} rows", positions.len())));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                cos.push(sc::<T>(angle.cos()));
                sin.push(sc::<T>(angle.sin()));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..seq {
            for h in 0..width / head_dim {
                let base_idx = s * width + h * head_dim;
                for i in 0..half {
                    let (c, sn) = (cos[s * half + i], sin[s * half + i]);
                    let (a, b) = (src[base_idx + 2 * i], src[base_idx + 2 * i + 1]);
                    out[base_idx + 2 * i] = a * c - b * sn;
                    out[base_idx + 2 * i + 1] = a * sn + b * c;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Rope { x, head_dim, cos, sin }, &[x])
    }

    /// Reverse sweep from a scalar `loss`, adding into leaf gradients.
    ///
    /// Calling it again without building a new tape accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match adj[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                None => adj[v.0] = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    send(a, mm_nt(g, val(b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(b, mm_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.nodes[a.0].requires_grad {
                    send(a, mm(g, val(b), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    send(b, mm_tn(g, val(a), m, n, k));
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, fold_broadcast(g, val(b).len(), |gi, _| gi));
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, fold_broadcast(g, val(b).len(), |gi, _| -gi));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let n = vb.len();
                send(a, g.iter().enumerate().map(|(j, &gj)| gj * vb[j % n]).collect());
                send(b, fold_broadcast(g, n, |gj, j| gj * va[j]));
            }
            &Op::Scale(x, alpha) => send(x, g.iter().map(|&v| v * alpha).collect()),
            &Op::Gelu(x) => send(
                x,
                val(x).iter().zip(g).map(|(&v, &gj)| gj * gelu_grad(v)).collect(),
            ),
            &Op::Sin(x) => send(x, val(x).iter().zip(g).map(|(&v, &gj)| gj * v.cos()).collect()),
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + c;
                        let dot = (0..len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.len();
                let gv = val(*gain);
                let rows = rstd.len();
                let dn = T::from_usize(d).expect("d fits");
                let mut dx = vec![T::zero(); g.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for c in 0..d {
                        let j = r * d + c;
                        let dh = g[j] * gv[c];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * xhat[j];
                        dgain[c] = dgain[c] + g[j] * xhat[j];
                        dbias[c] = dbias[c] + g[j];
                    }
                    let (m1, m2) = (sum_dh / dn, sum_dh_h / dn);
                    for c in 0..d {
                        let j = r * d + c;
                        dx[j] = rstd[r] * (g[j] * gv[c] - m1 - xhat[j] * m2);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            &Op::Sum(x) => send(x, vec![g[0]; val(x).len()]),
            &Op::Mean(x) => {
                let n = val(x).len();
                let gi = g[0] / T::from_usize(n).expect("n fits");
                send(x, vec![gi; n]);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    send(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    send(p, part);
                    off += w;
                }
            }
            &Op::SliceRows(x, start) => {
                let cols = self.shape(x)[1];
                let mut dx = vec![T::zero(); val(x).len()];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                send(x, dx);
            }
            &Op::SliceCols(x, start) => {
                let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                let w = node.value.last_dim();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(x, dx);
            }
            Op::GatherRows(table, indices) => {
                let cols = self.shape(*table)[1];
                let mut dt = vec![T::zero(); val(*table).len()];
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] = dt[i * cols + c] + g[k * cols + c];
                    }
                }
                send(*table, dt);
            }
            Op::Rope { x, head_dim, cos, sin } => {
                let seq = self.shape(*x)[0];
                let width = g.len() / seq;
                let half = head_dim / 2;
                let mut dx = vec![T::zero(); g.len()];
                for s in 0..seq {
                    for h in 0..width / head_dim {
                        let b0 = s * width + h * head_dim;
                        for i in 0..half {
                            let (c, sn) = (cos[s * half + i], sin[s * half + i]);
                            let (ga, gb) = (g[b0 + 2 * i], g[b0 + 2 * i + 1]);
                            dx[b0 + 2 * i] = ga * c + gb * sn;
                            dx[b0 + 2 * i + 1] = -ga * sn + gb * c;
                        }
                    }
                }
                send(*x, dx);
            }
        }
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let lead = shape.iter().take_while(|&&d| d == 1).count();
    if lead == shape.len() {
        &shape[shape.len() - 1..]
    } else {
        &shape[lead..]
    }
}

/// Sums a full-size gradient back onto a broadcast operand of `n` elements.
fn fold_broadcast<T: Scalar>(g: &[T], n: usize, f: impl Fn(T, usize) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (j, &gj) in g.iter().enumerate() {
        out[j % n] = out[j % n] + f(gj, j);
    }
    out
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = sc::<T>((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + sc::<T>(0.044715) * x * x * x);
    sc::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = sc::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = sc::<T>(0.044715);
    let th = (c * (x + k * x * x * x)).tanh();
    let half = sc::<T>(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + sc::<T>(3.0) * k * x * x)
}

/// `[m,k] · [k,n]`
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// `[m,k] · [n,k]ᵀ`
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    c
}

/// `[k,m]ᵀ · [k,n]`
fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + api * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let ii = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(ii), &Tensor::identity(2));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_grad_is_column_sums_of_b() {
        // d sum(A·B) / dA[i][p] = sum_j B[p][j]
        let b = t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -3.0, 1.5]);
        let a = t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).with_grad();
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(av).unwrap();
        let row_sums: Vec<f64> = (0..3).map(|p| b.row(p).iter().sum()).collect();
        for i in 0..2 {
            for p in 0..3 {
                assert!((g[i * 3 + p] - row_sums[p]).abs() < 1e-12);
            }
        }
        // and against the finite-difference oracle
        let err = grad_check(
            |tape, x| {
                let bv = tape.constant(b.clone());
                let c = tape.matmul(x, bv)?;
                tape.sum(c)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn add_broadcasts_trailing_axis_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3, 4]));
        let good = tape.constant(Tensor::ones(&[4]));
        let row = tape.constant(Tensor::ones(&[1, 4]));
        let bad = tape.constant(Tensor::ones(&[3]));
        assert!(tape.add(x, good).is_ok());
        assert!(tape.add(x, row).is_ok());
        assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data = t(&[2, 2], &[1.0, -2.0, 3.5, 0.0]);
        let x = tape.constant(data.clone());
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), &data);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // 0.5·1·(1+tanh(√(2/π)·1.044715))
        let expected = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * 1.044715f64).tanh());
        assert!((gelu_scalar(1.0f64) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0f64) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn softmax_values_and_normalization() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in tape.value(y).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        let rounded: Vec<f64> = tape.value(y).data().iter().map(|v| (v * 1e4).round() / 1e4).collect();
        assert_eq!(rounded, vec![0.09, 0.2447, 0.6652]);
    }

    #[test]
    fn softmax_non_last_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 5.0, -1.0, 2.0, 0.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        for c in 0..3 {
            assert!((v.at(0, c) + v.at(1, c) - 1.0).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(Tensor::ones(&[2]));
        let bias = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let c = tape.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let g3 = tape.constant(Tensor::ones(&[3]));
        assert!(matches!(tape.layer_norm(x, g3, bias, 1e-5), Err(Error::Dimension { .. })));
        assert!(tape.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let x = t(&[3], &[1.0, -2.0, 0.5]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let s = tape.sum(xv).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[1.0, 1.0, 1.0]);

        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, 4.0]);
        // a second sweep accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let x = t(&[3, 4], &[0.3, -0.7, 1.1, 0.2, -1.4, 0.9, 0.05, -0.3, 0.6, 0.8, -0.2, 1.7]).with_grad();
        let w = t(&[4, 4], &(0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect::<Vec<_>>());
        let err = grad_check(
            |tape, x| {
                let gain = tape.constant(t(&[4], &[1.2, 0.8, -0.5, 1.0]));
                let bias = tape.constant(t(&[4], &[0.1, 0.0, -0.2, 0.3]));
                let h = tape.layer_norm(x, gain, bias, 1e-5)?;
                let wv = tape.constant(w.clone());
                let h = tape.matmul(h, wv)?;
                let h = tape.gelu(h)?;
                let a = tape.matmul_nt(h, x)?;
                let a = tape.softmax(a, 1)?;
                let o = tape.matmul(a, h)?;
                let o = tape.rope(o, &[0, 3, 5], 2, 100.0)?;
                let top = tape.slice_rows(o, 1, 2)?;
                let left = tape.slice_cols(o, 0, 3)?;
                let g = tape.gather_rows(left, &[2, 0, 2])?;
                let cat = tape.concat_cols(&[g, top])?;
                let stacked = tape.concat_rows(&[cat, cat])?;
                let sq = tape.mul(stacked, stacked)?;
                let y = tape.sin(sq)?;
                let y = tape.scale(y, 0.7)?;
                tape.mean(y)
            },
            &x,
            1e-5,
        );
        // concat_cols of [3,3] and [2,4] rows differ; expect an error
        assert!(err.is_err());

        let err = grad_check(
            |tape, x| {
                let gain = tape.constant(t(&[4], &[1.2, 0.8, -0.5, 1.0]));
                let bias = tape.constant(t(&[4], &[0.1, 0.0, -0.2, 0.3]));
                let h = tape.layer_norm(x, gain, bias, 1e-5)?;
                let wv = tape.constant(w.clone());
                let h = tape.matmul(h, wv)?;
                let h = tape.gelu(h)?;
                let a = tape.matmul_nt(h, x)?;
                let a = tape.softmax(a, 1)?;
                let o = tape.matmul(a, h)?;
                let o = tape.rope(o, &[0, 3, 5], 2, 100.0)?;
                let top = tape.slice_rows(o, 1, 2)?;
                let left = tape.slice_cols(top, 0, 3)?;
                let g = tape.gather_rows(o, &[2, 0])?;
                let cat = tape.concat_cols(&[g, left])?;
                let stacked = tape.concat_rows(&[cat, cat])?;
                let sq = tape.mul(stacked, stacked)?;
                let y = tape.sin(sq)?;
                let y = tape.scale(y, 0.7)?;
                let b = tape.constant(t(&[7], &[0.1, 0.2, 0.3, -0.1, 0.0, 0.5, 1.0]));
                let y = tape.sub(y, b)?;
                tape.mean(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rectangular_matmul_grads_for_both_operands() {
        let a = t(&[2, 3], &[0.5, -1.0, 0.25, 1.5, 0.3, -0.7]);
        let b = t(&[3, 4], &(0..12).map(|i| (i as f64 - 5.5) / 4.0).collect::<Vec<_>>());
        let c = t(&[5, 3], &(0..15).map(|i| ((i * 3 % 7) as f64 - 3.0) / 5.0).collect::<Vec<_>>());
        let err = crate::tensor::grad_check_many(
            |tape, v| {
                let p = tape.matmul(v[0], v[1])?;
                let q = tape.matmul_nt(v[0], v[2])?;
                let p = tape.sin(p)?;
                let q = tape.sin(q)?;
                let s = tape.sum(p)?;
                let r = tape.sum(q)?;
                tape.add(s, r)
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences_for_all_inputs() {
        let gain = t(&[3], &[1.5, -0.5, 0.75]).with_grad();
        let x = t(&[2, 3], &[0.2, -1.0, 0.7, 1.5, 0.1, -0.3]);
        let err = grad_check(
            |tape, g| {
                let xv = tape.constant(x.clone());
                let b = tape.constant(t(&[3], &[0.0, 0.1, 0.2]));
                let y = tape.layer_norm(xv, g, b, 1e-5)?;
                let y = tape.mul(y, y)?;
                tape.sum(y)
            },
            &gain,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spread(row: &[f64]) -> f64 {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / row.len() as f64
        }

        proptest! {
            #[test]
            fn softmax_ignores_a_row_constant(data in prop::collection::vec(-10.0f64..10.0, 12), c in -50.0f64..50.0) {
                let x = t(&[3, 4], &data);
                let mut tape = Tape::new();
                let a = tape.constant(x.clone());
                let b = tape.constant(x.map(|v| v + c));
                let (a, b) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
                prop_assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() < 1e-12);
            }

            #[test]
            fn layer_norm_is_scale_free(data in prop::collection::vec(-3.0f64..3.0, 12), alpha in 0.5f64..20.0) {
                prop_assume!(data.chunks(4).all(|r| spread(r) > 1e-3));
                let x = t(&[3, 4], &data);
                let mut tape = Tape::new();
                let gain = tape.constant(Tensor::ones(&[4]));
                let bias = tape.constant(Tensor::zeros(&[4]));
                let a = tape.constant(x.clone());
                let b = tape.constant(x.map(|v| alpha * v));
                let a = tape.layer_norm(a, gain, bias, 1e-12).unwrap();
                let b = tape.layer_norm(b, gain, bias, 1e-12).unwrap();
                prop_assert!(tape.value(a).max_abs_diff(tape.value(b)).unwrap() < 1e-4);
            }
        }
    }
}
