//! Explicit reverse-mode tape.
//!
//! Every forward pass owns its own [`Tape`]; values are plain handles into
//! it. Nothing is global, so independent passes (and tests) never interact.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::attention::{self, AttentionLayout};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to an array recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias {
        a: usize,
        bias: usize,
        row_scale: Option<Rc<Vec<f64>>>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    Softmax(usize),
    SegmentSoftmax(usize, Rc<Vec<usize>>),
    SegmentWeightedSum {
        messages: usize,
        weights: usize,
        offsets: Rc<Vec<usize>>,
        out_rows: Rc<Vec<usize>>,
    },
    SparseAttention(Box<FusedNode>),
}

struct FusedNode {
    keys: usize,
    queries: usize,
    score: usize,
    score_bias: usize,
    layout: Rc<AttentionLayout>,
    alpha: Vec<f64>,
    clamped: Vec<bool>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every requires-grad leaf.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Value) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignValue);
        }
        Ok(v.index)
    }

    fn t(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Value> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Value {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Value> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Value {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Value> {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<Value> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Value) -> Result<&Tensor> {
        Ok(self.t(self.idx(v)?))
    }

    pub fn scalar(&self, v: Value) -> Result<f64> {
        let t = self.value(v)?;
        if t.len() != 1 {
            return Err(Error::shape("scalar", format!("expected one element, got {}", shape_str(t))));
        }
        Ok(t.data()[0])
    }

    pub fn requires_grad(&self, v: Value) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    /// Attention weights recorded by a [`Tape::sparse_attention`] node, in
    /// segment order.
    pub fn attention_weights(&self, v: Value) -> Result<Option<(&[f64], &AttentionLayout)>> {
        let i = self.idx(v)?;
        Ok(match &self.nodes[i].op {
            Op::SparseAttention(node) => Some((&node.alpha, &node.layout)),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.t(ia), self.t(ib));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{} x {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::new(&[n, m], out)?;
        self.push("matmul", value, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Adds a length-`m` bias to every row of an `n×m` array.
    pub fn add_bias(&mut self, a: Value, bias: Value) -> Result<Value> {
        self.add_bias_impl(a, bias, None)
    }

    /// Adds `row_scale[r] * bias` to row `r`.
    pub fn add_scaled_bias(&mut self, a: Value, bias: Value, row_scale: Rc<Vec<f64>>) -> Result<Value> {
        self.add_bias_impl(a, bias, Some(row_scale))
    }

    fn add_bias_impl(&mut self, a: Value, bias: Value, row_scale: Option<Rc<Vec<f64>>>) -> Result<Value> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (ta, tb) = (self.t(ia), self.t(ib));
        let m = ta.cols();
        if tb.len() != m {
            return Err(Error::shape(
                "add_bias",
                format!("{} + bias {}", shape_str(ta), shape_str(tb)),
            ));
        }
        if let Some(s) = &row_scale {
            if s.len() != ta.rows() {
                return Err(Error::shape(
                    "add_bias",
                    format!("row scale of length {} for {} rows", s.len(), ta.rows()),
                ));
            }
        }
        let mut out = ta.clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            let s = row_scale.as_ref().map_or(1.0, |s| s[r]);
            if s == 0.0 {
                continue;
            }
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += s * b;
            }
        }
        self.push(
            "add_bias",
            out,
            Op::AddBias {
                a: ia,
                bias: ib,
                row_scale,
            },
            &[ia, ib],
        )
    }

    fn binary(&mut self, name: &'static str, a: Value, b: Value, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.t(ia), self.t(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{} vs {}", shape_str(ta), shape_str(tb))));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(ta.shape(), data)?))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib, v) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib, v) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(ia, ib), &[ia, ib])
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib, v) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(ia, ib), &[ia, ib])
    }

    fn unary(&mut self, a: Value, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Ok((ia, Tensor::new(ta.shape(), data)?))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        let (ia, v) = self.unary(a, |x| c * x)?;
        self.push("scale", v, Op::Scale(ia, c), &[ia])
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let (ia, v) = self.unary(a, |x| x.max(0.0))?;
        self.push("relu", v, Op::Relu(ia), &[ia])
    }

    pub fn abs(&mut self, a: Value) -> Result<Value> {
        let (ia, v) = self.unary(a, f64::abs)?;
        self.push("abs", v, Op::Abs(ia), &[ia])
    }

    pub fn clamp(&mut self, a: Value, lo: f64, hi: f64) -> Result<Value> {
        let (ia, v) = self.unary(a, |x| x.clamp(lo, hi))?;
        self.push("clamp", v, Op::Clamp(ia, lo, hi), &[ia])
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let ia = self.idx(a)?;
        let s = self.t(ia).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn reshape(&mut self, a: Value, shape: &[usize]) -> Result<Value> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        let v = Tensor::new(shape, ta.data().to_vec())
            .map_err(|_| Error::shape("reshape", format!("{} -> {shape:?}", shape_str(ta))))?;
        self.push("reshape", v, Op::Reshape(ia), &[ia])
    }

    /// `out[r] = a[index[r]]`
    pub fn gather_rows(&mut self, a: Value, index: Rc<Vec<usize>>) -> Result<Value> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        let c = ta.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &r in index.iter() {
            if r >= ta.rows() {
                return Err(Error::OutOfRange {
                    what: "gather row",
                    index: r,
                    len: ta.rows(),
                });
            }
            out.extend_from_slice(ta.row(r));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = index.len();
        let v = Tensor::new(&shape, out)?;
        self.push("gather_rows", v, Op::GatherRows(ia, index), &[ia])
    }

    /// `out[index[r]] += a[r]`, with `n_rows` output rows.
    pub fn scatter_rows(&mut self, a: Value, index: Rc<Vec<usize>>, n_rows: usize) -> Result<Value> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        if index.len() != ta.rows() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} index entries for {} rows", index.len(), ta.rows()),
            ));
        }
        let c = ta.cols();
        let mut out = vec![0.0; n_rows * c];
        for (r, &dst) in index.iter().enumerate() {
            if dst >= n_rows {
                return Err(Error::OutOfRange {
                    what: "scatter row",
                    index: dst,
                    len: n_rows,
                });
            }
            for (o, x) in out[dst * c..(dst + 1) * c].iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = n_rows;
        let v = Tensor::new(&shape, out)?;
        self.push("scatter_rows", v, Op::ScatterRows(ia, index), &[ia])
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        if start + len > ta.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, shape_str(ta)),
            ));
        }
        let c = ta.cols();
        let mut shape = ta.shape().to_vec();
        shape[0] = len;
        let v = Tensor::new(&shape, ta.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows(ia, start), &[ia])
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let rows = self.t(ids[0]).rows();
        if let Some(&bad) = ids.iter().find(|&&i| self.t(i).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row count {} vs {}", self.t(bad).rows(), rows),
            ));
        }
        let total: usize = ids.iter().map(|&i| self.t(i).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &ids {
                out.extend_from_slice(self.t(i).row(r));
            }
        }
        let v = Tensor::new(&[rows, total], out)?;
        self.push("concat_cols", v, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Numerically stable softmax over the last axis (each row of a matrix,
    /// or the whole vector).
    pub fn softmax(&mut self, a: Value) -> Result<Value> {
        let ia = self.idx(a)?;
        let ta = self.t(ia);
        let width = *ta.shape().last().expect("rank >= 1");
        if width == 0 {
            return Err(Error::EmptySet);
        }
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(width) {
            attention::softmax_into(row, &mut out);
        }
        let v = Tensor::new(ta.shape(), out)?;
        self.push("softmax", v, Op::Softmax(ia), &[ia])
    }

    /// Softmax over contiguous blocks `offsets[s]..offsets[s+1]` of a flat
    /// score array. Empty blocks are allowed and produce nothing.
    pub fn segment_softmax(&mut self, scores: Value, offsets: Rc<Vec<usize>>) -> Result<Value> {
        let ia = self.idx(scores)?;
        let ta = self.t(ia);
        if offsets.last().copied() != Some(ta.len()) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::shape("segment_softmax", "offsets must be sorted and end at the score count"));
        }
        let mut out = Vec::with_capacity(ta.len());
        for w in offsets.windows(2) {
            if w[1] > w[0] {
                attention::softmax_into(&ta.data()[w[0]..w[1]], &mut out);
            }
        }
        let v = Tensor::vector(out);
        self.push("segment_softmax", v, Op::SegmentSoftmax(ia, offsets), &[ia])
    }

    /// `out[out_rows[s]] += Σ_{p in segment s} weights[p] · messages[p]`.
    pub fn segment_weighted_sum(
        &mut self,
        messages: Value,
        weights: Value,
        offsets: Rc<Vec<usize>>,
        out_rows: Rc<Vec<usize>>,
        n_out: usize,
    ) -> Result<Value> {
        let (im, iw) = (self.idx(messages)?, self.idx(weights)?);
        let (tm, tw) = (self.t(im), self.t(iw));
        if tm.rows() != tw.len() || offsets.last().copied() != Some(tw.len()) || out_rows.len() + 1 != offsets.len() {
            return Err(Error::shape(
                "segment_weighted_sum",
                format!("messages {} weights {}", shape_str(tm), shape_str(tw)),
            ));
        }
        let d = tm.cols();
        let mut out = vec![0.0; n_out * d];
        for (s, w) in offsets.windows(2).enumerate() {
            let o = out_rows[s];
            if o >= n_out {
                return Err(Error::OutOfRange {
                    what: "segment output row",
                    index: o,
                    len: n_out,
                });
            }
            for p in w[0]..w[1] {
                let a = tw.data()[p];
                for (ov, mv) in out[o * d..(o + 1) * d].iter_mut().zip(tm.row(p)) {
                    *ov += a * mv;
                }
            }
        }
        let v = Tensor::new(&[n_out, d], out)?;
        self.push(
            "segment_weighted_sum",
            v,
            Op::SegmentWeightedSum {
                messages: im,
                weights: iw,
                offsets,
                out_rows,
            },
            &[im, iw],
        )
    }

    /// Fused sparse additive attention, see [`super::attention`].
    ///
    /// `keys` and `queries` are first-layer projections (`n_key×d`,
    /// `n_query×d`), `score` is a length-`d` scoring vector and
    /// `score_bias` a scalar added to every logit.
    pub fn sparse_attention(
        &mut self,
        keys: Value,
        queries: Value,
        score: Value,
        score_bias: Value,
        layout: Rc<AttentionLayout>,
    ) -> Result<Value> {
        let (ik, iq, iu, ic) = (
            self.idx(keys)?,
            self.idx(queries)?,
            self.idx(score)?,
            self.idx(score_bias)?,
        );
        let (tk, tq, tu, tc) = (self.t(ik), self.t(iq), self.t(iu), self.t(ic));
        let d = tk.cols();
        if tk.shape().len() != 2
            || tq.shape().len() != 2
            || tq.cols() != d
            || tu.len() != d
            || tc.len() != 1
            || tk.rows() != layout.n_key()
            || tq.rows() != layout.n_query()
        {
            return Err(Error::shape(
                "sparse_attention",
                format!(
                    "keys {} queries {} score {} bias {} for layout ({} keys, {} queries)",
                    shape_str(tk),
                    shape_str(tq),
                    shape_str(tu),
                    shape_str(tc),
                    layout.n_key(),
                    layout.n_query()
                ),
            ));
        }
        let fwd = attention::fused_forward(tk, tq, tu.data(), tc.data()[0], &layout);
        self.push(
            "sparse_attention",
            fwd.out,
            Op::SparseAttention(Box::new(FusedNode {
                keys: ik,
                queries: iq,
                score: iu,
                score_bias: ic,
                layout,
                alpha: fwd.alpha,
                clamped: fwd.clamped,
            })),
            &[ik, iq, iu, ic],
        )
    }

    /// Runs reverse accumulation from a scalar root. A tape supports a single
    /// backward pass.
    pub fn backward(&mut self, root: Value) -> Result<Gradients> {
        let ir = self.idx(root)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.t(ir).len() != 1 {
            return Err(Error::NonScalarRoot(self.t(ir).shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Tensor::zeros(self.t(ir).shape());
        seed.data_mut()[0] = 1.0;
        grads[ir] = Some(seed);

        for i in (0..=ir).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], p: usize, contrib: Tensor) {
        if !self.nodes[p].requires_grad {
            return;
        }
        match &mut grads[p] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib.reshaped(self.nodes[p].value.shape())),
        }
    }

    fn wants(&self, p: usize) -> bool {
        self.nodes[p].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.t(*a), self.t(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt_acc(gd, tb.data(), &mut da, n, k, m);
                    self.accumulate(grads, *a, Tensor::vector(da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn_acc(ta.data(), gd, &mut db, n, k, m);
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::AddBias { a, bias, row_scale } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*bias) {
                    let m = out.cols();
                    let mut db = vec![0.0; m];
                    for (r, row) in gd.chunks(m).enumerate() {
                        let s = row_scale.as_ref().map_or(1.0, |s| s[r]);
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += s * x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let neg = gd.iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, Tensor::vector(neg));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.t(*a), self.t(*b));
                if self.wants(*a) {
                    let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::vector(da));
                }
                if self.wants(*b) {
                    let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Scale(a, c) => {
                let da = gd.iter().map(|x| c * x).collect();
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::Relu(a) => {
                let da = gd
                    .iter()
                    .zip(self.t(*a).data())
                    .map(|(x, &pre)| if pre > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::Abs(a) => {
                let da = gd
                    .iter()
                    .zip(self.t(*a).data())
                    .map(|(x, &pre)| {
                        if pre > 0.0 {
                            *x
                        } else if pre < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::Clamp(a, lo, hi) => {
                let da = gd
                    .iter()
                    .zip(self.t(*a).data())
                    .map(|(x, &pre)| if pre >= *lo && pre <= *hi { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::Sum(a) => {
                let n = self.t(*a).len();
                self.accumulate(grads, *a, Tensor::vector(vec![gd[0]; n]));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::GatherRows(a, index) => {
                let ta = self.t(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for (r, &src) in index.iter().enumerate() {
                    for (d, x) in da[src * c..(src + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::ScatterRows(a, index) => {
                let c = out.cols();
                let mut da = Vec::with_capacity(index.len() * c);
                for &dst in index.iter() {
                    da.extend_from_slice(&gd[dst * c..(dst + 1) * c]);
                }
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::SliceRows(a, start) => {
                let ta = self.t(*a);
                let c = ta.cols();
                let mut da = vec![0.0; ta.len()];
                da[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::ConcatCols(ids) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in ids {
                    let w = self.t(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::vector(dp));
                    }
                    offset += w;
                }
            }
            Op::Softmax(a) => {
                let width = *out.shape().last().expect("rank >= 1");
                let mut da = vec![0.0; out.len()];
                for ((y, gr), d) in out
                    .data()
                    .chunks(width)
                    .zip(gd.chunks(width))
                    .zip(da.chunks_mut(width))
                {
                    attention::softmax_backward_into(y, gr, d);
                }
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut da = vec![0.0; out.len()];
                for w in offsets.windows(2) {
                    let (s, e) = (w[0], w[1]);
                    attention::softmax_backward_into(&out.data()[s..e], &gd[s..e], &mut da[s..e]);
                }
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::SegmentWeightedSum {
                messages,
                weights,
                offsets,
                out_rows,
            } => {
                let (tm, tw) = (self.t(*messages), self.t(*weights));
                let d = tm.cols();
                let mut dm = vec![0.0; tm.len()];
                let mut dw = vec![0.0; tw.len()];
                for (s, w) in offsets.windows(2).enumerate() {
                    let go = &gd[out_rows[s] * d..(out_rows[s] + 1) * d];
                    for p in w[0]..w[1] {
                        let a = tw.data()[p];
                        dw[p] = super::array::dot(go, tm.row(p));
                        for (x, gv) in dm[p * d..(p + 1) * d].iter_mut().zip(go) {
                            *x += a * gv;
                        }
                    }
                }
                self.accumulate(grads, *messages, Tensor::vector(dm));
                self.accumulate(grads, *weights, Tensor::vector(dw));
            }
            Op::SparseAttention(node) => {
                let fg = attention::fused_backward(
                    self.t(node.keys),
                    self.t(node.queries),
                    self.t(node.score).data(),
                    &node.layout,
                    &node.alpha,
                    &node.clamped,
                    g,
                );
                self.accumulate(grads, node.keys, Tensor::vector(fg.keys));
                self.accumulate(grads, node.queries, Tensor::vector(fg.queries));
                self.accumulate(grads, node.score, Tensor::vector(fg.u));
                self.accumulate(grads, node.score_bias, Tensor::scalar(fg.c));
            }
        }
    }
}
