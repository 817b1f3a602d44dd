//! Additive attention block: messages `r = MLP([key, query])`, scores
//! `α = softmax(r · w)` per message set, context `Σ α r`.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{AttentionLayout, BoundParams, Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, Value, LOGIT_CLAMP};

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    msg: Mlp,
    score: ParamId,
    key_width: usize,
    query_width: usize,
}

/// Result of one attention evaluation.
#[derive(Clone, Debug)]
pub struct Attended {
    pub context: Value,
    /// Weights in segment order, either a fused attention node (read with
    /// [`Tape::attention_weights`]) or a flat weight vector.
    pub weights: Value,
    pub fused: bool,
}

impl AttentionBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        key_width: usize,
        query_width: usize,
        hidden: usize,
        depth: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::with_hidden(key_width + query_width, hidden, depth, out)?;
        let msg = Mlp::init(store, prefix, spec, rng)?;
        let bound = 1.0 / (out as f64).sqrt();
        let w = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
        let score = store.insert(format!("{prefix}.score"), Tensor::vector(w))?;
        Ok(Self {
            msg,
            score,
            key_width,
            query_width,
        })
    }

    pub fn message_mlp(&self) -> &Mlp {
        &self.msg
    }

    pub fn score(&self) -> ParamId {
        self.score
    }

    /// The fused kernel covers two-layer message MLPs.
    pub fn can_fuse(&self) -> bool {
        self.msg.spec().depth() == 2
    }

    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        keys: Value,
        queries: Value,
        layout: &Rc<AttentionLayout>,
        fused: bool,
    ) -> Result<Attended> {
        let kp = self.msg.input_projection(tape, p, keys, 0, self.key_width)?;
        let qp = self.msg.input_projection(tape, p, queries, self.key_width, self.query_width)?;
        let qp = tape.add_bias(qp, p[self.msg.biases()[0]])?;
        if fused && self.can_fuse() {
            self.attend_fused(tape, p, kp, qp, layout)
        } else {
            self.attend_materialized(tape, p, kp, qp, layout)
        }
    }

    // The last layer is linear and the weights of a non-empty set sum to one,
    // so Σ α (g W₁ + b₁) = (Σ α g) W₁ + b₁ and α ∝ exp(g·(W₁w) + b₁·w).
    fn attend_fused(&self, tape: &mut Tape, p: &BoundParams, kp: Value, qp: Value, layout: &Rc<AttentionLayout>) -> Result<Attended> {
        let out_w = self.msg.spec().output();
        let (w1, b1) = (p[self.msg.weights()[1]], p[self.msg.biases()[1]]);
        let w_col = tape.reshape(p[self.score], &[out_w, 1])?;
        let u = tape.matmul(w1, w_col)?;
        let b_row = tape.reshape(b1, &[1, out_w])?;
        let c = tape.matmul(b_row, w_col)?;
        let g = tape.sparse_attention(kp, qp, u, c, Rc::clone(layout))?;
        let projected = tape.matmul(g, w1)?;
        let context = tape.add_scaled_bias(projected, b1, Rc::new(layout.nonempty_per_out()))?;
        Ok(Attended {
            context,
            weights: g,
            fused: true,
        })
    }

    fn attend_materialized(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        kp: Value,
        qp: Value,
        layout: &Rc<AttentionLayout>,
    ) -> Result<Attended> {
        let pairs = layout.pair_count();
        let mut key_idx = Vec::with_capacity(pairs);
        let mut query_idx = Vec::with_capacity(pairs);
        let mut out_rows = Vec::with_capacity(layout.segments().len());
        for seg in layout.segments() {
            for &k in layout.keys(seg) {
                key_idx.push(k as usize);
                query_idx.push(seg.query as usize);
            }
            out_rows.push(seg.out as usize);
        }
        let offsets = Rc::new(layout.weight_offsets());
        let kg = tape.gather_rows(kp, Rc::new(key_idx))?;
        let qg = tape.gather_rows(qp, Rc::new(query_idx))?;
        let pre = tape.add(kg, qg)?;
        let r = self.msg.finish(tape, p, pre)?;
        let w_col = tape.reshape(p[self.score], &[self.msg.spec().output(), 1])?;
        let s = tape.matmul(r, w_col)?;
        let s = tape.clamp(s, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        let alpha = tape.segment_softmax(s, Rc::clone(&offsets))?;
        let context = tape.segment_weighted_sum(r, alpha, offsets, Rc::new(out_rows), layout.n_out())?;
        Ok(Attended {
            context,
            weights: alpha,
            fused: false,
        })
    }
}

/// Attention weights of an evaluated block, one vector per non-empty
/// message set, in segment order.
pub fn weight_sets(tape: &Tape, attended: &Attended, layout: &AttentionLayout) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = if attended.fused {
        match tape.attention_weights(attended.weights)? {
            Some((a, _)) => a.to_vec(),
            None => Vec::new(),
        }
    } else {
        tape.value(attended.weights)?.data().to_vec()
    };
    let offsets = layout.weight_offsets();
    Ok(offsets
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| flat[w[0]..w[1]].to_vec())
        .collect())
}
