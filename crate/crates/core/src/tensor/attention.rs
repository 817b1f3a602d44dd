//! Segment layouts and kernels for sparse additive attention.
//!
//! A layout is a list of *segments*. Each segment pairs one query row with
//! a list of key rows and writes its result into one output row; several
//! segments may share an output row, in which case their contributions are
//! summed. Key lists are stored once and shared between segments, because
//! the same observed steps of a node are attended by every query step.
//!
//! The fused kernel evaluates, for every segment,
//!
//! ```text
//! g_s   = relu(K[s] + Q[q])            (first MLP layer, split by linearity)
//! a_s   = softmax_s(clamp(g_s · u + c))
//! out  += sum_s a_s * g_s
//! ```
//!
//! which equals the attention-weighted sum of two-layer MLP messages once
//! the caller applies the output layer to `out` (the weights sum to one, so
//! the last linear layer commutes with the weighted sum).

use super::array::{dot, Tensor};
use crate::error::{Error, Result};

/// Logit clamp applied before every attention softmax.
pub const LOGIT_CLAMP: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub out: u32,
    pub query: u32,
    pub keys: u32,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionLayout {
    n_out: usize,
    n_query: usize,
    n_key: usize,
    key_index: Vec<u32>,
    key_lists: Vec<(u32, u32)>,
    segments: Vec<Segment>,
}

impl AttentionLayout {
    pub fn new(n_query: usize, n_key: usize, n_out: usize) -> Self {
        Self {
            n_out,
            n_query,
            n_key,
            ..Default::default()
        }
    }

    /// Registers a key list and returns its id.
    pub fn add_key_list(&mut self, keys: impl IntoIterator<Item = usize>) -> Result<u32> {
        let start = self.key_index.len();
        for k in keys {
            if k >= self.n_key {
                return Err(Error::OutOfRange {
                    what: "attention key",
                    index: k,
                    len: self.n_key,
                });
            }
            self.key_index.push(k as u32);
        }
        let len = self.key_index.len() - start;
        self.key_lists.push((start as u32, len as u32));
        Ok((self.key_lists.len() - 1) as u32)
    }

    pub fn add_segment(&mut self, out: usize, query: usize, keys: u32) -> Result<()> {
        if out >= self.n_out {
            return Err(Error::OutOfRange {
                what: "attention output",
                index: out,
                len: self.n_out,
            });
        }
        if query >= self.n_query {
            return Err(Error::OutOfRange {
                what: "attention query",
                index: query,
                len: self.n_query,
            });
        }
        if keys as usize >= self.key_lists.len() {
            return Err(Error::OutOfRange {
                what: "attention key list",
                index: keys as usize,
                len: self.key_lists.len(),
            });
        }
        self.segments.push(Segment {
            out: out as u32,
            query: query as u32,
            keys,
        });
        Ok(())
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_key(&self) -> usize {
        self.n_key
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn keys(&self, seg: &Segment) -> &[u32] {
        let (start, len) = self.key_lists[seg.keys as usize];
        &self.key_index[start as usize..(start + len) as usize]
    }

    /// Number of (query, key) pairs evaluated by one pass over this layout.
    pub fn pair_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| self.key_lists[s.keys as usize].1 as usize)
            .sum()
    }

    /// Per output row, the number of segments with at least one key.
    pub fn nonempty_per_out(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_out];
        for s in &self.segments {
            if self.key_lists[s.keys as usize].1 > 0 {
                counts[s.out as usize] += 1.0;
            }
        }
        counts
    }

    /// Start offset of every segment's weights in the flat weight buffer.
    pub fn weight_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &self.segments {
            acc += self.key_lists[s.keys as usize].1 as usize;
            offsets.push(acc);
        }
        offsets
    }
}

pub(crate) struct FusedForward {
    pub out: Tensor,
    pub alpha: Vec<f64>,
    pub clamped: Vec<bool>,
}

/// Dot product with four independent partial sums, which lets the compiler
/// vectorize the loop. The summation order is fixed, so results are
/// deterministic.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `g[s] = relu(K[keys[s]] + q)` for every key of a segment, row-major.
#[inline]
fn fill_messages(kd: &[f64], d: usize, keys: &[u32], q: &[f64], g: &mut Vec<f64>) {
    g.clear();
    for &k in keys {
        let k = k as usize;
        g.extend(kd[k * d..(k + 1) * d].iter().zip(q).map(|(kv, qv)| (kv + qv).max(0.0)));
    }
}

pub(crate) fn fused_forward(
    keys: &Tensor,
    queries: &Tensor,
    u: &[f64],
    c: f64,
    layout: &AttentionLayout,
) -> FusedForward {
    let d = keys.cols();
    let kd = keys.data();
    let pairs = layout.pair_count();
    let mut out = vec![0.0; layout.n_out * d];
    let mut alpha = Vec::with_capacity(pairs);
    let mut clamped = Vec::with_capacity(pairs);
    let mut scores: Vec<f64> = Vec::new();
    let mut g: Vec<f64> = Vec::new();

    for seg in &layout.segments {
        let ks = layout.keys(seg);
        if ks.is_empty() {
            continue;
        }
        fill_messages(kd, d, ks, queries.row(seg.query as usize), &mut g);
        scores.clear();
        for row in g.chunks_exact(d) {
            let raw = dot4(row, u) + c;
            clamped.push(raw.abs() > LOGIT_CLAMP);
            scores.push(raw.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
        }
        let start = alpha.len();
        softmax_into(&scores, &mut alpha);
        let orow = &mut out[seg.out as usize * d..(seg.out as usize + 1) * d];
        for (row, &a) in g.chunks_exact(d).zip(&alpha[start..]) {
            for (o, gv) in orow.iter_mut().zip(row) {
                *o += a * gv;
            }
        }
    }

    FusedForward {
        out: Tensor::new(&[layout.n_out, d], out).expect("fused attention output shape"),
        alpha,
        clamped,
    }
}

pub(crate) struct FusedGrads {
    pub keys: Vec<f64>,
    pub queries: Vec<f64>,
    pub u: Vec<f64>,
    pub c: f64,
}

pub(crate) fn fused_backward(
    keys: &Tensor,
    queries: &Tensor,
    u: &[f64],
    layout: &AttentionLayout,
    alpha: &[f64],
    clamped: &[bool],
    grad_out: &Tensor,
) -> FusedGrads {
    let d = keys.cols();
    let kd = keys.data();
    let mut dk = vec![0.0; kd.len()];
    let mut dq = vec![0.0; queries.len()];
    let mut du = vec![0.0; d];
    let mut dc = 0.0;
    let mut dalpha: Vec<f64> = Vec::new();
    let mut g: Vec<f64> = Vec::new();
    let mut dg = vec![0.0; d];
    let mut offset = 0;

    for seg in &layout.segments {
        let ks = layout.keys(seg);
        if ks.is_empty() {
            continue;
        }
        let qi = seg.query as usize;
        fill_messages(kd, d, ks, queries.row(qi), &mut g);
        let go = grad_out.row(seg.out as usize);
        let al = &alpha[offset..offset + ks.len()];
        let cl = &clamped[offset..offset + ks.len()];
        offset += ks.len();

        dalpha.clear();
        let mut mean = 0.0;
        for (row, &a) in g.chunks_exact(d).zip(al) {
            let da = dot4(row, go);
            mean += a * da;
            dalpha.push(da);
        }

        let dqrow = &mut dq[qi * d..(qi + 1) * d];
        for ((((row, &k), &a), &da), &is_clamped) in g.chunks_exact(d).zip(ks).zip(al).zip(&dalpha).zip(cl) {
            let k = k as usize;
            let ds = if is_clamped { 0.0 } else { a * (da - mean) };
            dc += ds;
            for t in 0..d {
                dg[t] = if row[t] > 0.0 { a * go[t] + ds * u[t] } else { 0.0 };
            }
            for ((x, y), gv) in dk[k * d..(k + 1) * d].iter_mut().zip(dqrow.iter_mut()).zip(&dg) {
                *x += gv;
                *y += gv;
            }
            for (x, gv) in du.iter_mut().zip(row) {
                *x += ds * gv;
            }
        }
    }

    FusedGrads {
        keys: dk,
        queries: dq,
        u: du,
        c: dc,
    }
}

/// Appends the max-shifted softmax of `logits` to `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &s in logits {
        let e = (s - max).exp();
        total += e;
        out.push(e);
    }
    for a in &mut out[start..] {
        *a /= total;
    }
}

/// Backward of a softmax block: `dx = y ⊙ (g − Σ y·g)`.
pub(crate) fn softmax_backward_into(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let m = dot(y, g);
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
        *d += yv * (gv - m);
    }
}
