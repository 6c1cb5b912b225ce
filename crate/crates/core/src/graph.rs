//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! constants or variables; [`Graph::backward`] returns gradients for every
//! node that depends on a variable. Graphs are built per example and thrown
//! away after the backward pass.

use std::collections::BTreeMap;

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId, a_t: bool, b_t: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    Scale { x: NodeId, factor: T },
    Gelu(NodeId),
    Abs(NodeId),
    Mean(NodeId),
    LayerNorm { x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>, normed: Vec<T>, rstd: Vec<T> },
    SoftmaxRows(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { x: NodeId, index: Vec<usize> },
    Reshape(NodeId),
    Unfold { x: NodeId, n_seq: usize, seq_len: usize, kernel: usize, stride: usize },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Parameters of a [`ParamSet`] inserted into a graph, by name.
#[derive(Debug, Default, Clone)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }

    /// Collect gradients of the trainable bound parameters.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.ids
            .iter()
            .filter_map(|(name, id)| grads.take(*id).map(|g| (name.clone(), g)))
            .collect()
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert every parameter of `params`; those accepted by `trainable`
    /// become variables, the rest constants.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut bound = Bound::default();
        for (name, tensor) in params.iter() {
            let id = if trainable(name) {
                self.variable(tensor.clone())
            } else {
                self.constant(tensor.clone())
            };
            bound.ids.insert(name.to_string(), id);
        }
        bound
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: NodeId, a_t: bool, b: NodeId, b_t: bool) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = if a_t { (av.cols(), av.rows()) } else { av.shape() };
        let (k2, n) = if b_t { (bv.cols(), bv.rows()) } else { bv.shape() };
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let mut out = Tensor::zeros(m, n);
        T::gemm(m, k, n, av.data(), a_t, bv.data(), b_t, T::zero(), out.data_mut());
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, a_t, b_t }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Add a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (xv, rv) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        assert_eq!(rv.rows(), 1, "broadcast operand must be a single row");
        assert_eq!(xv.cols(), rv.cols(), "broadcast width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            add_into(out.row_mut(r), rv.data());
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow { x, row }, rg)
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let y = self.matmul(x, weight);
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (c, a) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
        let half = T::lit(0.5);
        let out = self.nodes[x.0].value.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// Mean of all elements, as a `1 x 1` tensor.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = T::from_usize(xv.len()).expect("count");
        let s: T = xv.data().iter().copied().sum();
        let out = Tensor::filled(1, 1, s / n);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Row-wise layer normalization with optional affine `1 x n` parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.shape();
        let n = T::from_usize(cols).expect("width");
        let eps = T::lit(LN_EPS);
        let mut normed = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                normed[r * cols + c] = (row[c] - mean) * s;
            }
        }
        let mut out = Tensor::from_vec(rows, cols, normed.clone()).expect("shape");
        if let Some(g) = gamma {
            let gv = self.nodes[g.0].value.data();
            assert_eq!(gv.len(), cols, "layer norm gain width");
            for r in 0..rows {
                for (o, gg) in out.row_mut(r).iter_mut().zip(gv) {
                    *o *= *gg;
                }
            }
        }
        if let Some(b) = beta {
            let bv = self.nodes[b.0].value.data();
            assert_eq!(bv.len(), cols, "layer norm bias width");
            for r in 0..rows {
                add_into(out.row_mut(r), bv);
            }
        }
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        self.push(out, Op::LayerNorm { x, gamma, beta, normed, rstd }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(start + width <= xv.cols(), "column slice out of range");
        let out = Tensor::from_fn(xv.rows(), width, |r, c| xv.get(r, start + c));
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows(), rows, "concat row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                out.row_mut(r)[off..off + w].copy_from_slice(self.nodes[p.0].value.row(r));
                off += w;
            }
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> NodeId {
        let out = self.nodes[x.0].value.select_rows(index);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows { x, index: index.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let out = self.nodes[x.0].value.clone().reshape(rows, cols).expect("reshape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Sliding windows over `n_seq` stacked sequences.
    ///
    /// `x` is `(n_seq * seq_len) x width`; the result has one row per window
    /// position of every sequence, holding the `kernel` consecutive rows of the
    /// window concatenated (`kernel * width` columns).
    pub fn unfold(&mut self, x: NodeId, n_seq: usize, kernel: usize, stride: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(n_seq > 0 && xv.rows().is_multiple_of(n_seq), "unfold sequence count");
        let seq_len = xv.rows() / n_seq;
        assert!(seq_len >= kernel, "sequence shorter than kernel");
        let width = xv.cols();
        let out_len = (seq_len - kernel) / stride + 1;
        let mut out = Tensor::zeros(n_seq * out_len, kernel * width);
        for s in 0..n_seq {
            for o in 0..out_len {
                let src = (s * seq_len + o * stride) * width;
                out.row_mut(s * out_len + o).copy_from_slice(&xv.data()[src..src + kernel * width]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Unfold { x, n_seq, seq_len, kernel, stride }, rg)
    }

    /// Mean softmax cross-entropy of `n x c` logits against class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows(), labels.len(), "one label per logit row");
        let (rows, cols) = lv.shape();
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let n = T::from_usize(rows.max(1)).expect("count");
        let out = Tensor::filled(1, 1, loss / n);
        let rg = self.rg(&[logits]);
        self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg)
    }

    /// Reverse pass from a scalar `1 x 1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            let (r, c) = self.nodes[id.0].value.shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().expect("initialized"));
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = if *a_t { (av.cols(), av.rows()) } else { av.shape() };
                let n = y.cols();
                self.accumulate(grads, *a, |ga| {
                    if *a_t {
                        // stored k x m: op(b) * gy^T
                        T::gemm(k, n, m, bv.data(), *b_t, gy.data(), true, T::one(), ga.data_mut());
                    } else {
                        T::gemm(m, n, k, gy.data(), false, bv.data(), !*b_t, T::one(), ga.data_mut());
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    if *b_t {
                        // stored n x k: gy^T * op(a)
                        T::gemm(n, m, k, gy.data(), true, av.data(), *a_t, T::one(), gb.data_mut());
                    } else {
                        T::gemm(k, m, n, av.data(), !*a_t, gy.data(), false, T::one(), gb.data_mut());
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g.data_mut(), gy.data()));
                self.accumulate(grads, *b, |g| add_into(g.data_mut(), gy.data()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g.data_mut(), gy.data()));
                self.accumulate(grads, *b, |g| {
                    for (d, s) in g.data_mut().iter_mut().zip(gy.data()) {
                        *d -= *s;
                    }
                });
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, |g| add_into(g.data_mut(), gy.data()));
                self.accumulate(grads, *row, |g| {
                    for r in 0..gy.rows() {
                        add_into(g.data_mut(), gy.row(r));
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |g| {
                    for (d, s) in g.data_mut().iter_mut().zip(gy.data()) {
                        *d += *s * *factor;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                let (c, a) = (T::lit(SQRT_2_OVER_PI), T::lit(GELU_CUBIC));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                self.accumulate(grads, *x, |g| {
                    for ((d, s), &v) in g.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dv = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        *d += *s * dv;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = &self.nodes[x.0].value;
                self.accumulate(grads, *x, |g| {
                    for ((d, s), &v) in g.data_mut().iter_mut().zip(gy.data()).zip(xv.data()) {
                        if v > T::zero() {
                            *d += *s;
                        } else if v < T::zero() {
                            *d -= *s;
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.nodes[x.0].value.len()).expect("count");
                let share = gy.get(0, 0) / n;
                self.accumulate(grads, *x, |g| {
                    for d in g.data_mut() {
                        *d += share;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let (rows, cols) = y.shape();
                let gamma_v = gamma.map(|g| self.nodes[g.0].value.data());
                // dL/dnormed
                let mut dn = gy.data().to_vec();
                if let Some(gv) = gamma_v {
                    for r in 0..rows {
                        for c in 0..cols {
                            dn[r * cols + c] *= gv[c];
                        }
                    }
                }
                if let Some(g) = gamma {
                    self.accumulate(grads, *g, |gg| {
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data_mut()[c] += gy.get(r, c) * normed[r * cols + c];
                            }
                        }
                    });
                }
                if let Some(b) = beta {
                    self.accumulate(grads, *b, |gb| {
                        for r in 0..rows {
                            add_into(gb.data_mut(), gy.row(r));
                        }
                    });
                }
                let n = T::from_usize(cols).expect("width");
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let dnr = &dn[r * cols..(r + 1) * cols];
                        let nr = &normed[r * cols..(r + 1) * cols];
                        let mean_dn = dnr.iter().copied().sum::<T>() / n;
                        let mean_dn_n = dnr.iter().zip(nr).map(|(a, b)| *a * *b).sum::<T>() / n;
                        let row = gx.row_mut(r);
                        for c in 0..cols {
                            row[c] += rstd[r] * (dnr[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                self.accumulate(grads, *x, |g| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gy.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        let out = g.row_mut(r);
                        for c in 0..yr.len() {
                            out[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let w = y.cols();
                self.accumulate(grads, *x, |g| {
                    for r in 0..y.rows() {
                        add_into(&mut g.row_mut(r)[*start..*start + w], gy.row(r));
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accumulate(grads, *p, |g| {
                        for r in 0..y.rows() {
                            add_into(g.row_mut(r), &gy.row(r)[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows { x, index } => {
                self.accumulate(grads, *x, |g| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(g.row_mut(src), gy.row(r));
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |g| add_into(g.data_mut(), gy.data()));
            }
            Op::Unfold { x, n_seq, seq_len, kernel, stride } => {
                let width = self.nodes[x.0].value.cols();
                let out_len = (seq_len - kernel) / stride + 1;
                self.accumulate(grads, *x, |g| {
                    for s in 0..*n_seq {
                        for o in 0..out_len {
                            let dst = (s * seq_len + o * stride) * width;
                            add_into(&mut g.data_mut()[dst..dst + kernel * width], gy.row(s * out_len + o));
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (rows, cols) = self.nodes[logits.0].value.shape();
                let share = gy.get(0, 0) / T::from_usize(rows.max(1)).expect("count");
                self.accumulate(grads, *logits, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let onehot = if labels[r] == c { T::one() } else { T::zero() };
                            g.data_mut()[r * cols + c] += share * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}
