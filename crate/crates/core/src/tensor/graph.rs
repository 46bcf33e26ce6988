use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Scalar, Tensor, TensorError};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Affine(NodeId, T),
    Concat(Vec<NodeId>),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    SegmentSum(NodeId, Arc<[usize]>),
    SegmentProd(NodeId, Arc<[usize]>),
    Gather(NodeId, Arc<[usize]>),
    ClampMin(NodeId, T),
    NormalizeRows(NodeId, Vec<f64>),
    Mean(NodeId),
    Sum(NodeId),
    KlDiv(NodeId, NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// An eagerly evaluated computation tape.
///
/// Every operation computes its value immediately and records how to push
/// gradients back to its inputs. Node ids are issued in evaluation order, so
/// the node list is already a topological order.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Probability clamp inside the KL node's logarithms.
pub const KL_EPS: f64 = 1e-8;

fn t64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("finite")
}

fn mismatch<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<(), TensorError> {
    match idx.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(TensorError::IndexOutOfRange { op, index, bound }),
        None => Ok(()),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A named differentiable leaf; its gradient is reported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> NodeId {
        let id = self.input(value);
        self.params.insert(name.into(), id);
        id
    }

    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 || av.shape.len() != 2 || bv.shape.len() != 2 {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &av.data, (k, 1), &bv.data, (n, 1), &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op_name: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch(op_name, av, bv));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[c]` (or `[1, c]`) row vector to every row of `[r, c]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        let (_, c) = av.dims2()?;
        if rv.len() != c {
            return Err(mismatch("add_row", av, rv));
        }
        let mut data = av.data.clone();
        if c > 0 {
            for chunk in data.chunks_mut(c) {
                for (x, &b) in chunk.iter_mut().zip(&rv.data) {
                    *x = *x + b;
                }
            }
        }
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (s, b) = (T::from_f64(scale), T::from_f64(shift));
        let v = self.map(x, |v| s * v + b);
        let rg = self.rg(&[x]);
        self.push(v, Op::Affine(x, s), rg)
    }

    fn map(&self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::Rank {
            op: "concat",
            shape: vec![],
        })?;
        let rows = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(mismatch("concat", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(t64(v)));
            let exps: Vec<f64> = row.iter().map(|&v| (t64(v) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (o, e) in data[i * c..(i + 1) * c].iter_mut().zip(exps) {
                *o = T::from_f64(e / sum);
            }
        }
        let shape = xv.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(x), rg))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut data = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| t64(v)).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (t64(v) - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = T::from_f64((t64(v) - mean) * is);
            }
            inv_std.push(is);
        }
        let shape = xv.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm(x, inv_std), rg))
    }

    /// Scatter-add: output row `j` is the sum of input rows `e` with
    /// `ids[e] == j`.
    pub fn segment_sum(&mut self, values: NodeId, ids: Arc<[usize]>, num_segments: usize) -> Result<NodeId, TensorError> {
        let vv = self.value(values);
        let (e, c) = vv.dims2()?;
        if ids.len() != e {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                lhs: vv.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        check_indices("segment_sum", &ids, num_segments)?;
        let data = scatter_add(&vv.data, c, &ids, num_segments);
        let rg = self.rg(&[values]);
        Ok(self.push(
            Tensor {
                shape: vec![num_segments, c],
                data,
            },
            Op::SegmentSum(values, ids),
            rg,
        ))
    }

    /// Scatter-multiply: output row `j` is the elementwise product of input
    /// rows with `ids[e] == j`; empty segments give 1.
    pub fn segment_prod(&mut self, values: NodeId, ids: Arc<[usize]>, num_segments: usize) -> Result<NodeId, TensorError> {
        let vv = self.value(values);
        let (e, c) = vv.dims2()?;
        if ids.len() != e {
            return Err(TensorError::ShapeMismatch {
                op: "segment_prod",
                lhs: vv.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        check_indices("segment_prod", &ids, num_segments)?;
        let mut acc = vec![1.0f64; num_segments * c];
        for (row, &s) in ids.iter().enumerate() {
            for j in 0..c {
                acc[s * c + j] *= t64(vv.data[row * c + j]);
            }
        }
        let data = acc.into_iter().map(T::from_f64).collect();
        let rg = self.rg(&[values]);
        Ok(self.push(
            Tensor {
                shape: vec![num_segments, c],
                data,
            },
            Op::SegmentProd(values, ids),
            rg,
        ))
    }

    /// Row lookup: output row `e` is `table[idx[e]]`.
    pub fn gather(&mut self, table: NodeId, idx: Arc<[usize]>) -> Result<NodeId, TensorError> {
        let tv = self.value(table);
        let (r, c) = tv.dims2()?;
        check_indices("gather", &idx, r)?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&tv.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), c],
                data,
            },
            Op::Gather(table, idx),
            rg,
        ))
    }

    /// `max(x, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let f = T::from_f64(floor);
        let v = self.map(x, |v| v.max(f));
        let rg = self.rg(&[x]);
        self.push(v, Op::ClampMin(x, f), rg)
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut data = vec![T::zero(); r * c];
        let mut sums = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv.data[i * c..(i + 1) * c];
            let s: f64 = row.iter().map(|&v| t64(v)).sum();
            for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = T::from_f64(t64(v) / s);
            }
            sums.push(s);
        }
        let shape = xv.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::NormalizeRows(x, sums), rg))
    }

    /// Mean of all elements, as a `[1, 1]` tensor.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let s: f64 = xv.data.iter().map(|&v| t64(v)).sum();
        let n = xv.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().map(|&v| t64(v)).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    /// Row-mean of `KL(target_row ‖ pred_row)`, with both sides clamped to
    /// `[1e-8, 1]` inside the logarithms. Zero target entries contribute
    /// nothing.
    pub fn kl_div(&mut self, target: NodeId, pred: NodeId) -> Result<NodeId, TensorError> {
        let (tv, pv) = (self.value(target), self.value(pred));
        if tv.shape != pv.shape {
            return Err(mismatch("kl_div", tv, pv));
        }
        let (r, _) = tv.dims2()?;
        let mut total = 0.0f64;
        for (&t, &p) in tv.data.iter().zip(&pv.data) {
            let (t, p) = (t64(t), t64(p));
            if t > 0.0 {
                total += t * (t.clamp(KL_EPS, 1.0).ln() - p.clamp(KL_EPS, 1.0).ln());
            }
        }
        let value = Tensor::scalar(T::from_f64(total / r.max(1) as f64));
        let rg = self.rg(&[target, pred]);
        Ok(self.push(value, Op::KlDiv(target, pred), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(node, &g, &mut grads);
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let n = &self.nodes[i];
                match (&n.op, n.requires_grad) {
                    (Op::Leaf, true) => Some(Tensor {
                        shape: n.value.shape.clone(),
                        data: g.unwrap_or_else(|| vec![T::zero(); n.value.len()]),
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    fn push_back(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[id.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                acc(*a, &mut |da| T::gemm(m, n, k, g, (n, 1), &bv.data, (1, n), da, true));
                acc(*b, &mut |db| T::gemm(k, m, n, &av.data, (1, k), g, (n, 1), db, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(bv) {
                        *x = *x + y * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &y), &o) in d.iter_mut().zip(g).zip(av) {
                        *x = *x + y * o;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                let c = self.value(*row).len();
                acc(*row, &mut |d| {
                    if c == 0 {
                        return;
                    }
                    let mut sums = vec![0.0f64; c];
                    for chunk in g.chunks(c) {
                        for (s, &v) in sums.iter_mut().zip(chunk) {
                            *s += t64(v);
                        }
                    }
                    for (x, s) in d.iter_mut().zip(sums) {
                        *x = *x + T::from_f64(s);
                    }
                });
            }
            Op::Affine(x, scale) => acc(*x, &mut |d| {
                for (v, &y) in d.iter_mut().zip(g) {
                    *v = *v + *scale * y;
                }
            }),
            Op::Concat(parts) => {
                let rows = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut d[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((v, &y), &o) in d.iter_mut().zip(g).zip(&out.data) {
                    if o > T::zero() {
                        *v = *v + y;
                    }
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((v, &y), &o) in d.iter_mut().zip(g).zip(&out.data) {
                    *v = *v + y * (T::one() - o * o);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((v, &y), &o) in d.iter_mut().zip(g).zip(&out.data) {
                    *v = *v + y * o * (T::one() - o);
                }
            }),
            Op::Softmax(x) => {
                let c = out.shape[out.shape.len() - 1];
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| t64(a) * t64(b)).sum();
                        for ((v, &gy), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *v = *v + T::from_f64(t64(y) * (t64(gy) - dot));
                        }
                    }
                });
            }
            Op::LayerNorm(x, inv_std) => {
                let c = out.shape[out.shape.len() - 1];
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), yr)) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)).enumerate() {
                        let mg = gr.iter().map(|&v| t64(v)).sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| t64(a) * t64(b)).sum::<f64>() / c as f64;
                        for ((v, &gy), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *v = *v + T::from_f64(inv_std[r] * (t64(gy) - mg - t64(y) * mgy));
                        }
                    }
                });
            }
            Op::SegmentSum(values, ids) => {
                let c = out.cols();
                acc(*values, &mut |d| {
                    for (e, &s) in ids.iter().enumerate() {
                        add_into(&mut d[e * c..(e + 1) * c], &g[s * c..(s + 1) * c]);
                    }
                });
            }
            Op::SegmentProd(values, ids) => {
                let c = out.cols();
                let vv = &self.value(*values).data;
                acc(*values, &mut |d| segment_prod_backward(vv, c, ids, out.shape[0], g, d));
            }
            Op::Gather(table, idx) => {
                let c = out.cols();
                let rows = self.value(*table).rows();
                acc(*table, &mut |d| {
                    let summed = scatter_add(g, c, idx, rows);
                    add_into(d, &summed);
                });
            }
            Op::ClampMin(x, floor) => {
                let xv = &self.value(*x).data;
                acc(*x, &mut |d| {
                    for ((v, &y), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi >= *floor {
                            *v = *v + y;
                        }
                    }
                });
            }
            Op::NormalizeRows(x, sums) => {
                let c = out.cols();
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), yr)) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| t64(a) * t64(b)).sum();
                        for (v, &gy) in dr.iter_mut().zip(gr) {
                            *v = *v + T::from_f64((t64(gy) - dot) / sums[r]);
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let s = T::from_f64(t64(g[0]) / n);
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v = *v + s));
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v = *v + g[0])),
            Op::KlDiv(target, pred) => {
                let (tv, pv) = (&self.value(*target).data, &self.value(*pred).data);
                let scale = t64(g[0]) / self.value(*target).rows().max(1) as f64;
                acc(*pred, &mut |d| {
                    for ((v, &t), &p) in d.iter_mut().zip(tv).zip(pv) {
                        let (t, p) = (t64(t), t64(p));
                        if t > 0.0 && p > KL_EPS && p <= 1.0 {
                            *v = *v + T::from_f64(-scale * t / p);
                        }
                    }
                });
                acc(*target, &mut |d| {
                    for ((v, &t), &p) in d.iter_mut().zip(tv).zip(pv) {
                        let (t, p) = (t64(t), t64(p));
                        if t > KL_EPS && t <= 1.0 {
                            *v = *v + T::from_f64(scale * (t.ln() + 1.0 - p.clamp(KL_EPS, 1.0).ln()));
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn scatter_add<T: Scalar>(values: &[T], c: usize, ids: &[usize], num_segments: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; num_segments * c];
    for (e, &s) in ids.iter().enumerate() {
        let dst = &mut acc[s * c..(s + 1) * c];
        for (a, &v) in dst.iter_mut().zip(&values[e * c..(e + 1) * c]) {
            *a += t64(v);
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// Gradient of a segment product: each member receives the product of the
/// other members of its segment (prefix/suffix products, so zeros are fine).
fn segment_prod_backward<T: Scalar>(values: &[T], c: usize, ids: &[usize], num_segments: usize, g: &[T], d: &mut [T]) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_segments];
    for (e, &s) in ids.iter().enumerate() {
        members[s].push(e);
    }
    let mut prefix = Vec::new();
    for (s, list) in members.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        for j in 0..c {
            let gs = t64(g[s * c + j]);
            prefix.clear();
            let mut p = 1.0f64;
            for &e in list {
                prefix.push(p);
                p *= t64(values[e * c + j]);
            }
            let mut suffix = 1.0f64;
            for (k, &e) in list.iter().enumerate().rev() {
                let others = prefix[k] * suffix;
                d[e * c + j] = d[e * c + j] + T::from_f64(gs * others);
                suffix *= t64(values[e * c + j]);
            }
        }
    }
}

/// Gradients of a [`Graph::backward`] sweep for every differentiable leaf.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    leaves: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&id| self.wrt(id))
    }

    /// Gradient of every named parameter (zero if the loss does not use it).
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(name, id)| {
                let g = self.leaves[id.0].take().expect("params are differentiable leaves");
                (name, g)
            })
            .collect()
    }
}
