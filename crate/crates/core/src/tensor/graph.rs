use std::collections::HashMap;

use super::{dims2, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64, raw: f64 },
    GatherRows { table: Var, ids: Vec<usize> },
    Unfold { x: Var, k: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Unfold { x, .. }
            | Op::MaxRows { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so every node's inputs precede it and backward is a single reverse sweep.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("param node without store")
                .tensor(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input node ids of `v`, for graph inspection.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node; it receives a gradient iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: Some(tensor),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Node bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "graph was built without a param store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; p * r];
        matmul_kernel(ta.data(), tb.data(), &mut out, p, q, r);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![p, r], out), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Contract(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::from_parts(vec![c, r], out), "transpose")
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise sum. Either operand may broadcast along any dimension of
    /// extent 1 (rank-1 tensors count as a single row).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, (r, c)) = broadcast_shape(ta.shape(), tb.shape())?;
        let (ra, ca) = dims2(ta.shape())?;
        let (rb, cb) = dims2(tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out: Vec<f64> = if ta.shape() == tb.shape() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let x = da[bidx(i, ra) * ca + bidx(j, ca)];
                    let y = db[bidx(i, rb) * cb + bidx(j, cb)];
                    out.push(f(x, y));
                }
            }
            out
        };
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        self.push(Op::Binary(kind, a, b), Tensor::from_parts(shape, out), name)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Scale(x, factor), Tensor::from_parts(shape, out), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v + shift).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Shift(x), Tensor::from_parts(shape, out), "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, out), name)
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis. `mask` is either one flag per element or
    /// one flag per column (shared by all rows); masked entries come out as
    /// exactly zero. A row with no live entry is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = dims2(t.shape())?;
        let per_row = if mask.len() == rows * cols {
            false
        } else if mask.len() == cols {
            true
        } else {
            return Err(Error::dim("masked_softmax", t.shape(), &[mask.len()]));
        };
        let src = t.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let m = if per_row {
                mask
            } else {
                &mask[i * cols..(i + 1) * cols]
            };
            let row = &src[i * cols..(i + 1) * cols];
            let dst = &mut out[i * cols..(i + 1) * cols];
            softmax_row(row, m, dst).ok_or(Error::DegenerateRow { row: i })?;
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax(x), Tensor::from_parts(shape, out), "masked_softmax")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = dims2(self.shape(x))?.1;
        self.masked_softmax(x, &vec![true; cols])
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = dims2(t.shape())?;
        if cols == 0 {
            return Err(Error::EmptyInput("log_softmax over empty axis"));
        }
        let src = t.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Op::LogSoftmax(x), Tensor::from_parts(shape, out), "log_softmax")
    }

    // ---- structural -----------------------------------------------------

    /// Concatenation. Rank-1 inputs join along axis 0; rank-2 inputs along
    /// rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::EmptyInput("concat of no tensors"))?;
        let rank = self.shape(first).len();
        let (shape, out) = match (rank, axis) {
            (1, 0) => {
                let mut out = Vec::new();
                for &v in inputs {
                    let t = self.value(v);
                    if t.shape().len() != 1 {
                        return Err(Error::dim("concat", self.shape(first), t.shape()));
                    }
                    out.extend_from_slice(t.data());
                }
                (vec![out.len()], out)
            }
            (2, 0) => {
                let cols = self.shape(first)[1];
                let mut out = Vec::new();
                let mut rows = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.shape().len() != 2 || t.shape()[1] != cols {
                        return Err(Error::dim("concat", self.shape(first), t.shape()));
                    }
                    rows += t.shape()[0];
                    out.extend_from_slice(t.data());
                }
                (vec![rows, cols], out)
            }
            (2, 1) => {
                let rows = self.shape(first)[0];
                let mut widths = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let s = self.shape(v);
                    if s.len() != 2 || s[0] != rows {
                        return Err(Error::dim("concat", self.shape(first), s));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for (&v, &w) in inputs.iter().zip(&widths) {
                        out.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
                    }
                }
                (vec![rows, total], out)
            }
            _ => {
                return Err(Error::Contract(format!(
                    "concat along axis {axis} of rank-{rank} tensors"
                )))
            }
        };
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, out),
            "concat",
        )
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        let (shape, out) = match (s.len(), axis) {
            (1, 0) if start + len <= s[0] => (vec![len], t.data()[start..start + len].to_vec()),
            (2, 0) if start + len <= s[0] => {
                let c = s[1];
                (vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
            }
            (2, 1) if start + len <= s[1] => {
                let (r, c) = (s[0], s[1]);
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
                }
                (vec![r, len], out)
            }
            _ => return Err(Error::dim("slice", &s, &[axis, start, len])),
        };
        self.push(Op::Slice { x, axis, start }, Tensor::from_parts(shape, out), "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let out = t.data().to_vec();
        self.push(Op::Reshape(x), Tensor::from_parts(shape.to_vec(), out), "reshape")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Cosine similarity of two equally sized tensors, clamped to `[-1, 1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::dim("cosine", ta.shape(), tb.shape()));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let na = ta.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = tb.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let raw = dot / (na * nb);
        self.push(
            Op::Cosine { a, b, na, nb, raw },
            Tensor::scalar(raw.clamp(-1.0, 1.0)),
            "cosine",
        )
    }

    /// Embedding lookup: rows `ids` of a `[V, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::dim("gather_rows", s, &[id]));
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(vec![ids.len(), d], out),
            "gather_rows",
        )
    }

    /// Sliding windows of `k` consecutive rows, each flattened into one row:
    /// `[P, d] -> [P - k + 1, k * d]`.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || k == 0 || k > s[0] {
            return Err(Error::dim("unfold", s, &[k]));
        }
        let (p, d) = (s[0], s[1]);
        let windows = p - k + 1;
        let mut out = Vec::with_capacity(windows * k * d);
        for w in 0..windows {
            out.extend_from_slice(&t.data()[w * d..(w + k) * d]);
        }
        self.push(
            Op::Unfold { x, k },
            Tensor::from_parts(vec![windows, k * d], out),
            "unfold",
        )
    }

    /// Column-wise max over rows: `[P, F] -> [F]`. Ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim("max_rows", s, &[]));
        }
        let (p, f) = (s[0], s[1]);
        let src = t.data();
        let mut out = src[..f].to_vec();
        let mut argmax = vec![0; f];
        for i in 1..p {
            for j in 0..f {
                if src[i * f + j] > out[j] {
                    out[j] = src[i * f + j];
                    argmax[j] = i;
                }
            }
        }
        self.push(
            Op::MaxRows { x, argmax },
            Tensor::from_parts(vec![f], out),
            "max_rows",
        )
    }

    // ---- reverse sweep --------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`. Every node is visited
    /// at most once, in reverse insertion order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut kept: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => kept[idx] = Some(g),
                Op::Param(id) => params.push((*id, g)),
                op => self.propagate(op, Var(idx), &g, &mut grads)?,
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients {
            leaves: kept,
            params,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = (ta.shape()[0], ta.shape()[1]);
                let r = tb.shape()[1];
                if self.needs(*a) {
                    let ga = buf(grads, *a, p * q);
                    let bd = tb.data();
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &bd[k * r..(k + 1) * r];
                            ga[i * q + k] += dot(grow, brow);
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = buf(grads, *b, q * r);
                    let ad = ta.data();
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let av = ad[i * q + k];
                            if av == 0.0 {
                                continue;
                            }
                            for (dst, gv) in gb[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *dst += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ra, ca) = dims2(ta.shape())?;
                let (rb, cb) = dims2(tb.shape())?;
                let (r, c) = dims2(self.value(out).shape())?;
                let same = ta.shape() == tb.shape();
                for (side, this, other) in [(0, *a, *b), (1, *b, *a)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let (rt, ct) = if side == 0 { (ra, ca) } else { (rb, cb) };
                    let (ro, co) = if side == 0 { (rb, cb) } else { (ra, ca) };
                    let od = self.value(other).data();
                    let sign = if *kind == BinKind::Sub && side == 1 { -1.0 } else { 1.0 };
                    let dst = buf(grads, this, rt * ct);
                    if same {
                        for k in 0..g.len() {
                            dst[k] += match kind {
                                BinKind::Mul => g[k] * od[k],
                                _ => sign * g[k],
                            };
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                let gv = g[i * c + j];
                                let t = bidx(i, rt) * ct + bidx(j, ct);
                                dst[t] += match kind {
                                    BinKind::Mul => gv * od[bidx(i, ro) * co + bidx(j, co)],
                                    _ => sign * gv,
                                };
                            }
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                let dst = buf(grads, *x, g.len());
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                let dst = buf(grads, *x, g.len());
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dst = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    if xs[k] > 0.0 {
                        dst[k] += g[k];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let ys = self.value(out).data();
                let dst = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    dst[k] += g[k] * ys[k] * (1.0 - ys[k]);
                }
            }
            Op::Tanh(x) => {
                let ys = self.value(out).data();
                let dst = buf(grads, *x, g.len());
                for k in 0..g.len() {
                    dst[k] += g[k] * (1.0 - ys[k] * ys[k]);
                }
            }
            Op::Softmax(x) => {
                let y = self.value(out);
                let (rows, cols) = dims2(y.shape())?;
                let ys = y.data();
                let dst = buf(grads, *x, g.len());
                for i in 0..rows {
                    let span = i * cols..(i + 1) * cols;
                    let inner = dot(&ys[span.clone()], &g[span.clone()]);
                    for k in span {
                        dst[k] += ys[k] * (g[k] - inner);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = self.value(out);
                let (rows, cols) = dims2(y.shape())?;
                let ys = y.data();
                let dst = buf(grads, *x, g.len());
                for i in 0..rows {
                    let span = i * cols..(i + 1) * cols;
                    let total: f64 = g[span.clone()].iter().sum();
                    for k in span {
                        dst[k] += g[k] - ys[k].exp() * total;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.value(out).shape().to_vec();
                if out_shape.len() == 2 && *axis == 1 {
                    let rows = out_shape[0];
                    let total = out_shape[1];
                    let mut offset = 0;
                    for &v in inputs {
                        let w = self.shape(v)[1];
                        if self.needs(v) {
                            let dst = buf(grads, v, rows * w);
                            for i in 0..rows {
                                for j in 0..w {
                                    dst[i * w + j] += g[i * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                } else {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = self.value(v).numel();
                        if self.needs(v) {
                            let dst = buf(grads, v, n);
                            for (d, gv) in dst.iter_mut().zip(&g[offset..offset + n]) {
                                *d += gv;
                            }
                        }
                        offset += n;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.value(*x).shape().to_vec();
                let n: usize = src.iter().product();
                let dst = buf(grads, *x, n);
                if src.len() == 2 && *axis == 1 {
                    let (r, c) = (src[0], src[1]);
                    let len = g.len() / r;
                    for i in 0..r {
                        for j in 0..len {
                            dst[i * c + start + j] += g[i * len + j];
                        }
                    }
                } else {
                    let stride = if src.len() == 2 { src[1] } else { 1 };
                    let base = start * stride;
                    for (k, gv) in g.iter().enumerate() {
                        dst[base + k] += gv;
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.value(*x).shape().to_vec();
                let (r, c) = (s[0], s[1]);
                let dst = buf(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dst = buf(grads, *x, n);
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Cosine { a, b, na, nb, raw } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                for (this, mine, other, nm) in [(*a, da, db, *na), (*b, db, da, *nb)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let dst = buf(grads, this, mine.len());
                    for k in 0..mine.len() {
                        dst[k] += g[0] * (other[k] / (na * nb) - raw * mine[k] / (nm * nm));
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let s = self.value(*table).shape().to_vec();
                let d = s[1];
                let dst = buf(grads, *table, s[0] * d);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dst[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::Unfold { x, k } => {
                let s = self.value(*x).shape().to_vec();
                let (p, d) = (s[0], s[1]);
                let width = k * d;
                let dst = buf(grads, *x, p * d);
                for w in 0..p - k + 1 {
                    for (t, gv) in g[w * width..(w + 1) * width].iter().enumerate() {
                        dst[w * d + t] += gv;
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let s = self.value(*x).shape().to_vec();
                let f = s[1];
                let dst = buf(grads, *x, s[0] * f);
                for (j, &i) in argmax.iter().enumerate() {
                    dst[i * f + j] += g[j];
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`]: gradients of requires-grad leaves and of
/// every parameter reached from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`, if it was reached.
    pub fn leaf(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Adds the parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn bidx(i: usize, extent: usize) -> usize {
    if extent == 1 {
        0
    } else {
        i
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stabilised softmax of one row; `None` when every entry is masked.
pub(crate) fn softmax_row(row: &[f64], mask: &[bool], dst: &mut [f64]) -> Option<()> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for ((d, &v), &m) in dst.iter_mut().zip(row).zip(mask) {
        *d = if m { (v - max).exp() } else { 0.0 };
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
    Some(())
}

fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            // padded positions feed exact zeros; skipping them is exact
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[k * r..(k + 1) * r]) {
                *o += av * bv;
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, (usize, usize))> {
    if a == b {
        return Ok((a.to_vec(), dims2(a)?));
    }
    let (ra, ca) = dims2(a)?;
    let (rb, cb) = dims2(b)?;
    let join = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (join(ra, rb), join(ca, cb)) {
        (Some(r), Some(c)) => {
            let shape = if (ra, ca) == (r, c) {
                a.to_vec()
            } else if (rb, cb) == (r, c) {
                b.to_vec()
            } else {
                vec![r, c]
            };
            Ok((shape, (r, c)))
        }
        _ => Err(Error::dim("broadcast", a, b)),
    }
}
