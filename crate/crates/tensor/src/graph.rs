//! Append-only computation graph with eager forward evaluation and
//! reverse-mode backward. Inputs always precede outputs, so the node list
//! is a valid topological order by construction.

use crate::kernels;
use crate::{Gradients, ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant or parameter leaf.
    Leaf { param: Option<ParamId> },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, eps: f64 },
    MeanAxis { x: NodeId, axis: usize },
    MaxAxis { x: NodeId, axis: usize, argmax: Vec<usize> },
    SumAll(NodeId),
    CosineSim(NodeId, NodeId),
    Embed { table: NodeId, ids: Vec<usize> },
    Narrow { x: NodeId, axis: usize, start: usize, len: usize },
    ExpandScores { probs: NodeId, map: Vec<Option<usize>> },
    LogSumExp(NodeId),
    IndexScalar { x: NodeId, index: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Tape of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::NotTwoDim { op, shape: t.shape().to_vec() });
    }
    Ok((t.rows(), t.cols()))
}

/// Broadcast relation `b` may have toward `a` in elementwise ops.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    RowVec,
    Scalar,
}

fn bcast(a: (usize, usize), b: (usize, usize), op: &'static str) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Ok(Bcast::RowVec)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            detail: format!("[{}, {}] vs [{}, {}]", a.0, a.1, b.0, b.1),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node (computed when the node was pushed).
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Alias for [`Graph::value`]; the forward pass is cached at build time.
    pub fn evaluate(&self, id: NodeId) -> &Tensor {
        self.value(id)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a named parameter; the current value is copied onto the tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let id = store.id(name)?;
        Ok(self.push(Op::Leaf { param: Some(id) }, store.by_id(id).clone()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims differ: [{m}, {k}] vs [{k2}, {n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(self.value(x).data(), r, c, &mut out);
        Ok(self.push(Op::Transpose(x), Tensor::new(vec![c, r], out)?))
    }

    /// Concatenate along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let first = dims2(self.value(inputs[0]), "concat")?;
        let value = match axis {
            0 => {
                let cols = first.1;
                let mut data = Vec::new();
                let mut rows = 0;
                for &id in inputs {
                    let (r, c) = dims2(self.value(id), "concat")?;
                    if c != cols {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            detail: format!("column counts differ: {cols} vs {c}"),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(self.value(id).data());
                }
                Tensor::new(vec![rows, cols], data)?
            }
            1 => {
                let rows = first.0;
                let mut cols = 0;
                for &id in inputs {
                    let (r, c) = dims2(self.value(id), "concat")?;
                    if r != rows {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            detail: format!("row counts differ: {rows} vs {r}"),
                        });
                    }
                    cols += c;
                }
                let mut data = vec![0.0; rows * cols];
                let mut offset = 0;
                for &id in inputs {
                    let t = self.value(id);
                    let c = t.cols();
                    for r in 0..rows {
                        data[r * cols + offset..r * cols + offset + c]
                            .copy_from_slice(t.row_slice(r));
                    }
                    offset += c;
                }
                Tensor::new(vec![rows, cols], data)?
            }
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("axis must be 0 or 1, got {axis}"),
                })
            }
        };
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, value))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let ad = dims2(self.value(a), op_name)?;
        let bd = dims2(self.value(b), op_name)?;
        let how = bcast(ad, bd, op_name)?;
        let (r, c) = ad;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; r * c];
        match how {
            Bcast::Same => {
                for i in 0..r * c {
                    out[i] = f(av[i], bv[i]);
                }
            }
            Bcast::RowVec => {
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = f(av[i * c + j], bv[j]);
                    }
                }
            }
            Bcast::Scalar => {
                for i in 0..r * c {
                    out[i] = f(av[i], bv[0]);
                }
            }
        }
        Ok(self.push(make(a, b), Tensor::new(vec![r, c], out)?))
    }

    /// Elementwise add; `b` may be same-shape, a `[1, c]` row vector, or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product with the same broadcast rules as `add`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(x, factor), value))
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(make(x), value))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid)
    }

    /// ln(1 + exp(x)) in the stable form.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, kernels::softplus, Op::Softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        for (i, &v) in self.value(x).data().iter().enumerate() {
            if v <= 0.0 {
                return Err(TensorError::LnDomain { value: v, index: i });
            }
        }
        self.unary(x, f64::ln, Op::Ln)
    }

    /// Stable softmax along the last axis (per row).
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = dims2(self.value(x), "softmax")?;
        if c == 0 || r == 0 {
            return Err(TensorError::EmptySoftmax { shape: self.value(x).shape().to_vec() });
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_row(row);
        }
        Ok(self.push(Op::SoftmaxRows(x), Tensor::new(vec![r, c], data)?))
    }

    /// Per-row layer normalization without affine terms.
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = dims2(self.value(x), "layer_norm")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::layernorm_row(row, eps);
        }
        Ok(self.push(Op::LayerNormRows { x, eps }, Tensor::new(vec![r, c], data)?))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = dims2(self.value(x), "mean_axis")?;
        let xd = self.value(x).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += xd[i * c + j];
                    }
                }
                out.iter_mut().for_each(|v| *v /= r as f64);
                Tensor::new(vec![1, c], out)?
            }
            1 => {
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = xd[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                }
                Tensor::new(vec![r, 1], out)?
            }
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "mean_axis",
                    detail: format!("axis must be 0 or 1, got {axis}"),
                })
            }
        };
        Ok(self.push(Op::MeanAxis { x, axis }, value))
    }

    /// Max along an axis; ties resolve to the first index.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = dims2(self.value(x), "max_axis")?;
        if r == 0 || c == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "max_axis",
                detail: format!("empty input [{r}, {c}]"),
            });
        }
        let xd = self.value(x).data();
        let (value, argmax) = match axis {
            0 => {
                let mut out = vec![f64::NEG_INFINITY; c];
                let mut arg = vec![0usize; c];
                for i in 0..r {
                    for j in 0..c {
                        if xd[i * c + j] > out[j] {
                            out[j] = xd[i * c + j];
                            arg[j] = i;
                        }
                    }
                }
                (Tensor::new(vec![1, c], out)?, arg)
            }
            1 => {
                let mut out = vec![0.0; r];
                let mut arg = vec![0usize; r];
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let (mut best, mut bi) = (row[0], 0usize);
                    for (j, &v) in row.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            bi = j;
                        }
                    }
                    out[i] = best;
                    arg[i] = bi;
                }
                (Tensor::new(vec![r, 1], out)?, arg)
            }
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "max_axis",
                    detail: format!("axis must be 0 or 1, got {axis}"),
                })
            }
        };
        Ok(self.push(Op::MaxAxis { x, axis, argmax }, value))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        dims2(self.value(x), "sum_all")?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Op::SumAll(x), Tensor::scalar(s)))
    }

    /// Pairwise cosine similarity of the rows of `a` and `b` -> `[a.rows, b.rows]`.
    /// A zero-norm row yields cosine 0 with zero gradient.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, d) = dims2(self.value(a), "cosine_sim")?;
        let (n, d2) = dims2(self.value(b), "cosine_sim")?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                detail: format!("widths differ: {d} vs {d2}"),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * d..(i + 1) * d];
            let na = kernels::norm(ar);
            if na == 0.0 {
                continue;
            }
            for j in 0..n {
                let br = &bv[j * d..(j + 1) * d];
                let nb = kernels::norm(br);
                if nb == 0.0 {
                    continue;
                }
                out[i * n + j] = kernels::dot(ar, br) / (na * nb);
            }
        }
        Ok(self.push(Op::CosineSim(a, b), Tensor::new(vec![m, n], out)?))
    }

    /// Row gather from an embedding table: out[p] = table[ids[p]].
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = dims2(self.value(table), "embed")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embed", index: id, len: v });
            }
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tv.row_slice(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::Embed { table, ids: ids.to_vec() }, value))
    }

    /// Contiguous sub-block along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = dims2(self.value(x), "narrow")?;
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start + len > bound {
            return Err(TensorError::ShapeMismatch {
                op: "narrow",
                detail: format!("axis {axis} range {start}..{} exceeds [{r}, {c}]", start + len),
            });
        }
        let xd = self.value(x).data();
        let value = if axis == 0 {
            Tensor::new(vec![len, c], xd[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], data)?
        };
        Ok(self.push(Op::Narrow { x, axis, start, len }, value))
    }

    /// Single row as a `[1, c]` tensor (gradient flows back into that row).
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.narrow(x, 0, index, 1)
    }

    /// Expand group scores to positions: out[p] = probs[map[p]], or 1.0 where
    /// `map[p]` is `None`. `probs` must be a `[1, g]` row vector.
    pub fn expand_scores(&mut self, probs: NodeId, map: &[Option<usize>]) -> Result<NodeId> {
        let (r, g) = dims2(self.value(probs), "expand_scores")?;
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "expand_scores",
                detail: format!("probs must be a row vector, got [{r}, {g}]"),
            });
        }
        for m in map.iter().flatten() {
            if *m >= g {
                return Err(TensorError::IndexOutOfRange { op: "expand_scores", index: *m, len: g });
            }
        }
        let pv = self.value(probs).data();
        let data: Vec<f64> = map.iter().map(|m| m.map_or(1.0, |gi| pv[gi])).collect();
        let value = Tensor::new(vec![map.len(), 1], data)?;
        Ok(self.push(Op::ExpandScores { probs, map: map.to_vec() }, value))
    }

    /// log(sum(exp(x))) over all elements, computed stably.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::EmptySoftmax { shape: t.shape().to_vec() });
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = t.data().iter().map(|v| (v - max).exp()).sum();
        Ok(self.push(Op::LogSumExp(x), Tensor::scalar(max + s.ln())))
    }

    /// One element by flat index, as a scalar node.
    pub fn index_scalar(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(TensorError::IndexOutOfRange { op: "index_scalar", index, len: t.numel() });
        }
        let v = t.data()[index];
        Ok(self.push(Op::IndexScalar { x, index }, Tensor::scalar(v)))
    }

    /// Reverse-mode gradients of a scalar `root` for every parameter in
    /// `store`. Parameters not reachable from `root` get zero gradients.
    pub fn backward(&self, root: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: self.value(root).shape().to_vec() });
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[root.0] = Some(vec![1.0]);

        let mut grads = Gradients::zeros_like(store);

        for i in (0..=root.0).rev() {
            let g = match adjoint[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            macro_rules! acc {
                ($id:expr, $f:expr) => {{
                    let target = $id.0;
                    if adjoint[target].is_none() {
                        adjoint[target] = Some(vec![0.0; self.nodes[target].value.numel()]);
                    }
                    let buf = adjoint[target].as_mut().unwrap();
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf);
                }};
            }
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        let gt = grads.by_id_mut(*pid);
                        for (dst, src) in gt.data_mut().iter_mut().zip(&g) {
                            *dst += *src;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    // dA += G @ B^T
                    let mut bt = vec![0.0; k * n];
                    kernels::transpose(bv, k, n, &mut bt);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(&g, &bt, m, n, k, &mut da);
                    acc!(a, |buf: &mut Vec<f64>| for (d, s) in buf.iter_mut().zip(&da) {
                        *d += *s;
                    });
                    // dB += A^T @ G
                    let mut at = vec![0.0; m * k];
                    kernels::transpose(av, m, k, &mut at);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&at, &g, k, m, n, &mut db);
                    acc!(b, |buf: &mut Vec<f64>| for (d, s) in buf.iter_mut().zip(&db) {
                        *d += *s;
                    });
                }
                Op::Transpose(x) => {
                    let (c, r) = (node.value.rows(), node.value.cols());
                    let mut gt = vec![0.0; r * c];
                    kernels::transpose(&g, c, r, &mut gt);
                    acc!(x, |buf: &mut Vec<f64>| for (d, s) in buf.iter_mut().zip(&gt) {
                        *d += *s;
                    });
                }
                Op::Concat { inputs, axis } => {
                    let cols = node.value.cols();
                    if *axis == 0 {
                        let mut row_off = 0;
                        for &inp in inputs {
                            let r = self.nodes[inp.0].value.rows();
                            let start = row_off * cols;
                            let end = (row_off + r) * cols;
                            acc!(inp, |buf: &mut Vec<f64>| for (d, s) in
                                buf.iter_mut().zip(&g[start..end])
                            {
                                *d += *s;
                            });
                            row_off += r;
                        }
                    } else {
                        let rows = node.value.rows();
                        let mut col_off = 0;
                        for &inp in inputs {
                            let c = self.nodes[inp.0].value.cols();
                            acc!(inp, |buf: &mut Vec<f64>| for r in 0..rows {
                                for j in 0..c {
                                    buf[r * c + j] += g[r * cols + col_off + j];
                                }
                            });
                            col_off += c;
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(_, _)) { -1.0 } else { 1.0 };
                    acc!(a, |buf: &mut Vec<f64>| for (d, s) in buf.iter_mut().zip(&g) {
                        *d += *s;
                    });
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let bshape = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
                    acc!(b, |buf: &mut Vec<f64>| {
                        if bshape == (r, c) {
                            for (d, s) in buf.iter_mut().zip(&g) {
                                *d += sign * *s;
                            }
                        } else if bshape == (1, 1) {
                            buf[0] += sign * g.iter().sum::<f64>();
                        } else {
                            for i in 0..r {
                                for j in 0..c {
                                    buf[j] += sign * g[i * c + j];
                                }
                            }
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let bshape = (self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
                    acc!(a, |buf: &mut Vec<f64>| {
                        match bshape {
                            s if s == (r, c) => {
                                for i in 0..r * c {
                                    buf[i] += g[i] * bv[i];
                                }
                            }
                            (1, 1) => {
                                for i in 0..r * c {
                                    buf[i] += g[i] * bv[0];
                                }
                            }
                            _ => {
                                for i in 0..r {
                                    for j in 0..c {
                                        buf[i * c + j] += g[i * c + j] * bv[j];
                                    }
                                }
                            }
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| {
                        match bshape {
                            s if s == (r, c) => {
                                for i in 0..r * c {
                                    buf[i] += g[i] * av[i];
                                }
                            }
                            (1, 1) => {
                                buf[0] += g.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                            }
                            _ => {
                                for i in 0..r {
                                    for j in 0..c {
                                        buf[j] += g[i * c + j] * av[i * c + j];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Scale(x, factor) => {
                    let f = *factor;
                    acc!(x, |buf: &mut Vec<f64>| for (d, s) in buf.iter_mut().zip(&g) {
                        *d += f * *s;
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..y.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..y.len() {
                        buf[i] += g[i] * y[i] * (1.0 - y[i]);
                    });
                }
                Op::Softplus(x) => {
                    let xv = self.nodes[x.0].value.data();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..xv.len() {
                        buf[i] += g[i] * kernels::sigmoid(xv[i]);
                    });
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..y.len() {
                        buf[i] += g[i] * y[i];
                    });
                }
                Op::Ln(x) => {
                    let xv = self.nodes[x.0].value.data();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..xv.len() {
                        buf[i] += g[i] / xv[i];
                    });
                }
                Op::SoftmaxRows(x) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let y = node.value.data();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            buf[i * c + j] += yr[j] * (gr[j] - gy);
                        }
                    });
                }
                Op::LayerNormRows { x, eps } => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let xv = self.nodes[x.0].value.data();
                    let eps = *eps;
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let n = c as f64;
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let gr = &g[i * c..(i + 1) * c];
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gy: f64 = gr
                            .iter()
                            .zip(row)
                            .map(|(gv, xv)| gv * (xv - mean) * inv_std)
                            .sum::<f64>()
                            / n;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv_std;
                            buf[i * c + j] += inv_std * (gr[j] - gmean - xhat * gy);
                        }
                    });
                }
                Op::MeanAxis { x, axis } => {
                    let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    if *axis == 0 {
                        acc!(x, |buf: &mut Vec<f64>| for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j] / r as f64;
                            }
                        });
                    } else {
                        acc!(x, |buf: &mut Vec<f64>| for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[i] / c as f64;
                            }
                        });
                    }
                }
                Op::MaxAxis { x, axis, argmax } => {
                    let c = self.nodes[x.0].value.cols();
                    if *axis == 0 {
                        acc!(x, |buf: &mut Vec<f64>| for (j, &i) in argmax.iter().enumerate() {
                            buf[i * c + j] += g[j];
                        });
                    } else {
                        acc!(x, |buf: &mut Vec<f64>| for (i, &j) in argmax.iter().enumerate() {
                            buf[i * c + j] += g[i];
                        });
                    }
                }
                Op::SumAll(x) => {
                    acc!(x, |buf: &mut Vec<f64>| for d in buf.iter_mut() {
                        *d += g[0];
                    });
                }
                Op::CosineSim(a, b) => {
                    let d = self.nodes[a.0].value.cols();
                    let m = self.nodes[a.0].value.rows();
                    let n = self.nodes[b.0].value.rows();
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let y = node.value.data();
                    acc!(a, |buf: &mut Vec<f64>| for i in 0..m {
                        let ar = &av[i * d..(i + 1) * d];
                        let na = kernels::norm(ar);
                        if na == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let br = &bv[j * d..(j + 1) * d];
                            let nb = kernels::norm(br);
                            if nb == 0.0 {
                                continue;
                            }
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let c = y[i * n + j];
                            for t in 0..d {
                                buf[i * d + t] +=
                                    gij * (br[t] / (na * nb) - c * ar[t] / (na * na));
                            }
                        }
                    });
                    acc!(b, |buf: &mut Vec<f64>| for j in 0..n {
                        let br = &bv[j * d..(j + 1) * d];
                        let nb = kernels::norm(br);
                        if nb == 0.0 {
                            continue;
                        }
                        for i in 0..m {
                            let ar = &av[i * d..(i + 1) * d];
                            let na = kernels::norm(ar);
                            if na == 0.0 {
                                continue;
                            }
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let c = y[i * n + j];
                            for t in 0..d {
                                buf[j * d + t] +=
                                    gij * (ar[t] / (na * nb) - c * br[t] / (nb * nb));
                            }
                        }
                    });
                }
                Op::Embed { table, ids } => {
                    let d = node.value.cols();
                    acc!(table, |buf: &mut Vec<f64>| for (p, &id) in ids.iter().enumerate() {
                        for t in 0..d {
                            buf[id * d + t] += g[p * d + t];
                        }
                    });
                }
                Op::Narrow { x, axis, start, len } => {
                    let (_, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let rows_out = node.value.rows();
                    let cols_out = node.value.cols();
                    if *axis == 0 {
                        let off = start * c;
                        acc!(x, |buf: &mut Vec<f64>| for (i, s) in g.iter().enumerate() {
                            buf[off + i] += *s;
                        });
                    } else {
                        let (start, _len) = (*start, *len);
                        acc!(x, |buf: &mut Vec<f64>| for i in 0..rows_out {
                            for j in 0..cols_out {
                                buf[i * c + start + j] += g[i * cols_out + j];
                            }
                        });
                    }
                }
                Op::ExpandScores { probs, map } => {
                    acc!(probs, |buf: &mut Vec<f64>| for (p, m) in map.iter().enumerate() {
                        if let Some(gi) = m {
                            buf[*gi] += g[p];
                        }
                    });
                }
                Op::LogSumExp(x) => {
                    let xv = self.nodes[x.0].value.data();
                    let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xv.iter().map(|v| (v - max).exp()).sum();
                    acc!(x, |buf: &mut Vec<f64>| for i in 0..xv.len() {
                        buf[i] += g[0] * (xv[i] - max).exp() / denom;
                    });
                }
                Op::IndexScalar { x, index } => {
                    let idx = *index;
                    acc!(x, |buf: &mut Vec<f64>| buf[idx] += g[0]);
                }
            }
        }
        Ok(grads)
    }
}
