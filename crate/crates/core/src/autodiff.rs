//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Each node keeps its
//! value and just enough cached state to run its vector-Jacobian product, so
//! [`Tape::backward`] is a single reverse sweep over the node list. Nodes that
//! do not depend on any differentiable leaf are never visited.
//!
//! The op set is deliberately narrow: dense products, row-broadcast bias,
//! ReLU, layer normalization, row softmax, fused multi-head attention over
//! contiguous row blocks, segment means, column concatenation, row
//! gather/scatter for message passing, block-wise left multiplication for the
//! city/group transforms, and the mean-absolute-error loss.

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SegmentMean {
        x: Var,
        seg_len: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
    },
    BlockMatMul {
        m: Var,
        x: Var,
    },
    Transpose(Var),
    Mae {
        pred: Var,
        target: Tensor<T>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape with no parameter store; only [`Tape::input`] and
    /// [`Tape::constant`] leaves are available.
    pub fn new() -> Self {
        Self {
            params: None,
            bound: Vec::new(),
            frozen: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            bound: vec![None; params.len()],
            frozen: vec![false; params.len()],
            nodes: Vec::new(),
        }
    }

    /// Binds `id` as a constant on this tape: it contributes no gradient.
    pub fn freeze_param(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// The leaf bound to parameter `id`; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let value = store.value(id).clone();
        let needs = !self.frozen[id.index()];
        let v = self.push(value, Op::Leaf, needs);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + 1·bias` where `bias` is a single row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "bias width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Per-row layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let n = T::from_usize(cols).unwrap();
        let mut normed = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let out_row = out.row_mut(r);
            for c in 0..cols {
                let nv = (row[c] - mean) * rs;
                normed[r * cols + c] = nv;
                out_row[c] = nv * gv[c] + bv[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Multi-head scaled dot-product attention applied independently to each
    /// contiguous block of `seq_len` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        assert_eq!(kv.shape(), (rows, width));
        assert_eq!(vv.shape(), (rows, width));
        assert!(seq_len > 0 && rows % seq_len == 0, "rows not a multiple of seq_len");
        assert!(heads > 0 && width % heads == 0, "head count must divide width");
        let dk = width / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let n_seq = rows / seq_len;
        let mut probs = vec![T::zero(); n_seq * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(rows, width);
        let mut logits = vec![T::zero(); seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let off = h * dk;
                for i in 0..seq_len {
                    let qi = &qv.row(base + i)[off..off + dk];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &kv.row(base + j)[off..off + dk];
                        *l = dot(qi, kj) * scale;
                    }
                    let p = &mut probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    softmax_into(&logits, p);
                    let out_row = &mut out.row_mut(base + i)[off..off + dk];
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vv.row(base + j)[off..off + dk];
                        for (o, &x) in out_row.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, laid
    /// out as `[block][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in creation order.
    pub fn attention_vars(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    /// Mean over each contiguous block of `seg_len` rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(seg_len > 0 && rows % seg_len == 0);
        let inv = T::one() / T::from_usize(seg_len).unwrap();
        let mut out = Tensor::zeros(rows / seg_len, cols);
        for r in 0..rows {
            let dst = out.row_mut(r / seg_len);
            for (o, &v) in dst.iter_mut().zip(xv.row(r)) {
                *o += v * inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, seg_len }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat row mismatch");
                self.value(p).cols()
            })
            .sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(src));
        }
        let ng = self.ng(x);
        self.push(out, Op::GatherRows { x, index }, ng)
    }

    /// `out[index[i]] += x[i]`, with `out_rows` output rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Vec<usize>, out_rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(index.len(), xv.rows());
        let mut out = Tensor::zeros(out_rows, xv.cols());
        for (i, &dst) in index.iter().enumerate() {
            for (o, &v) in out.row_mut(dst).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ScatterAddRows { x, index }, ng)
    }

    /// For `m: [p×q]` and `x: [(B·q)×d]`, returns `[(B·p)×d]` whose `b`-th
    /// block is `m · x_b`.
    pub fn block_matmul(&mut self, m: Var, x: Var) -> Var {
        let mv = self.value(m);
        let xv = self.value(x);
        let (p, q) = mv.shape();
        let d = xv.cols();
        assert!(q > 0 && xv.rows().is_multiple_of(q), "block size mismatch");
        let blocks = xv.rows() / q;
        let mut out = Tensor::zeros(blocks * p, d);
        for b in 0..blocks {
            matmul_acc(
                mv.data(),
                &xv.data()[b * q * d..(b + 1) * q * d],
                &mut out.data_mut()[b * p * d..(b + 1) * p * d],
                p,
                q,
                d,
            );
        }
        let ng = self.ng(m) || self.ng(x);
        self.push(out, Op::BlockMatMul { m, x }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Mean absolute error against a fixed target; a 1×1 node.
    pub fn mae(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "prediction/target shape mismatch");
        let n = T::from_usize(pv.len().max(1)).unwrap();
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum::<T>()
            / n;
        let ng = self.ng(pred);
        self.push(Tensor::full(1, 1, loss), Op::Mae { pred, target }, ng)
    }

    /// `Σ x ∘ weights`; a 1×1 node. Builds arbitrary scalar probes for
    /// gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape());
        let total = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::full(1, 1, total), Op::WeightedSum { x, weights }, ng)
    }

    /// Runs the reverse sweep from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Gradients {
                grads,
                bound: self.bound.clone(),
            };
        }
        grads[loss.0] = Some(Tensor::full(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            // Interior gradients are kept for inspection.
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.ng(a) {
                    let ga = slot(grads, a, m, k);
                    matmul_bt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                }
                if self.ng(b) {
                    let gb = slot(grads, b, k, n);
                    matmul_at_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                }
            }
            &Op::AddBias(x, bias) => {
                if self.ng(x) {
                    accumulate(grads, x, g);
                }
                if self.ng(bias) {
                    let gb = slot(grads, bias, 1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.ng(a) {
                    accumulate(grads, a, g);
                }
                if self.ng(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let gx = slot(grads, x, xv.rows(), xv.cols());
                for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if v > T::zero() {
                        *o += gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                let gainv = self.value(*gain).data();
                if self.ng(*gain) {
                    let gg = slot(grads, *gain, 1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g[(r, c)] * normed[r * cols + c];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = slot(grads, *bias, 1, cols);
                    for r in 0..rows {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if self.ng(*x) {
                    let n = T::from_usize(cols).unwrap();
                    let gx = slot(grads, *x, rows, cols);
                    let mut dn = vec![T::zero(); cols];
                    for r in 0..rows {
                        let nrow = &normed[r * cols..(r + 1) * cols];
                        let mut sum_dn = T::zero();
                        let mut sum_dn_n = T::zero();
                        for c in 0..cols {
                            dn[c] = g[(r, c)] * gainv[c];
                            sum_dn += dn[c];
                            sum_dn_n += dn[c] * nrow[c];
                        }
                        let k = rstd[r] / n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] += k * (n * dn[c] - sum_dn - nrow[c] * sum_dn_n);
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let y = &node.value;
                let gx = slot(grads, x, y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - inner);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, g, grads),
            &Op::SegmentMean { x, seg_len } => {
                let inv = T::one() / T::from_usize(seg_len).unwrap();
                let cols = g.cols();
                let gx = slot(grads, x, g.rows() * seg_len, cols);
                for r in 0..g.rows() * seg_len {
                    for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(r / seg_len)) {
                        *o += v * inv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.ng(p) {
                        let gp = slot(grads, p, g.rows(), cols);
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                                *o += v;
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let gx = slot(grads, *x, xv.rows(), xv.cols());
                for (i, &src) in index.iter().enumerate() {
                    for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }
            Op::ScatterAddRows { x, index } => {
                let gx = slot(grads, *x, index.len(), g.cols());
                for (i, &dst) in index.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(dst)) {
                        *o += v;
                    }
                }
            }
            &Op::BlockMatMul { m, x } => {
                let (mv, xv) = (self.value(m), self.value(x));
                let (p, q) = mv.shape();
                let d = xv.cols();
                let blocks = xv.rows() / q;
                if self.ng(m) {
                    let gm = slot(grads, m, p, q);
                    for b in 0..blocks {
                        matmul_bt_acc(
                            &g.data()[b * p * d..(b + 1) * p * d],
                            &xv.data()[b * q * d..(b + 1) * q * d],
                            gm.data_mut(),
                            p,
                            d,
                            q,
                        );
                    }
                }
                if self.ng(x) {
                    let gx = slot(grads, x, xv.rows(), d);
                    for b in 0..blocks {
                        matmul_at_acc(
                            mv.data(),
                            &g.data()[b * p * d..(b + 1) * p * d],
                            &mut gx.data_mut()[b * q * d..(b + 1) * q * d],
                            p,
                            q,
                            d,
                        );
                    }
                }
            }
            &Op::Transpose(x) => accumulate(grads, x, &g.transpose()),
            Op::WeightedSum { x, weights } => {
                let mut scaled = weights.clone();
                scaled.scale(g[(0, 0)]);
                accumulate(grads, *x, &scaled);
            }
            Op::Mae { pred, target } => {
                let pv = self.value(*pred);
                let n = T::from_usize(pv.len().max(1)).unwrap();
                let scale = g[(0, 0)] / n;
                let gp = slot(grads, *pred, pv.rows(), pv.cols());
                for ((o, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    let diff = p - t;
                    if diff > T::zero() {
                        *o += scale;
                    } else if diff < T::zero() {
                        *o -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        let dk = width / heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let n_seq = rows / seq_len;
        let mut gq = Tensor::zeros(rows, width);
        let mut gk = Tensor::zeros(rows, width);
        let mut gv = Tensor::zeros(rows, width);
        let mut dp = vec![T::zero(); seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let off = h * dk;
                for i in 0..seq_len {
                    let p = &probs[((s * heads + h) * seq_len + i) * seq_len..][..seq_len];
                    let go = &g.row(base + i)[off..off + dk];
                    for j in 0..seq_len {
                        let vj = &vv.row(base + j)[off..off + dk];
                        dp[j] = dot(go, vj);
                        let gvj = &mut gv.row_mut(base + j)[off..off + dk];
                        for (o, &x) in gvj.iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq_len {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &kv.row(base + j)[off..off + dk];
                        let gqi = &mut gq.row_mut(base + i)[off..off + dk];
                        for (o, &x) in gqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.row(base + i)[off..off + dk];
                        let gkj = &mut gk.row_mut(base + j)[off..off + dk];
                        for (o, &x) in gkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            accumulate(grads, q, &gq);
        }
        if self.ng(k) {
            accumulate(grads, k, &gk);
        }
        if self.ng(v) {
            accumulate(grads, v, &gv);
        }
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a parameter bound on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// Gradients indexed by [`ParamId`], consuming `self`.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        let bound = std::mem::take(&mut self.bound);
        bound
            .into_iter()
            .map(|b| b.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}

fn slot<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    rows: usize,
    cols: usize,
) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn softmax_into<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_into(x.row(r), out.row_mut(r));
    }
    out
}
