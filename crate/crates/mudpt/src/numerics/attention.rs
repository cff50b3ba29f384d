//! Scaled dot-product multi-head attention, as a differentiable tape graph.
//!
//! One parameter set serves both the self-attention inside encoder layers and
//! the cross-modal attention of the injection model; only the query/key/value
//! sources differ.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Projection weights for one multi-head attention block of a fixed width.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub head_count: usize,
}

impl AttentionParams {
    /// Random initialization at a given width; weights are fan-in scaled
    /// (N(0, 1/sqrt(width))), biases zero. At the small widths this crate
    /// targets, a flat tiny init would leave attention unable to move
    /// information between positions, so the projections start at the scale
    /// that keeps per-row variance stable through the block.
    pub fn init<R: Rng>(model_width: usize, head_count: usize, rng: &mut R) -> Result<Self> {
        if head_count == 0 || model_width % head_count != 0 {
            return Err(Error::shape(
                "attention head partition",
                format!("width divisible by head_count"),
                format!("width {model_width}, heads {head_count}"),
            ));
        }
        let std = (model_width as f64).powf(-0.5);
        let w = |rng: &mut R| Tensor::randn(&[model_width, model_width], std, rng);
        let b = || Tensor::zeros(&[1, model_width]);
        Ok(AttentionParams {
            w_q: w(rng),
            b_q: b(),
            w_k: w(rng),
            b_k: b(),
            w_v: w(rng),
            b_v: b(),
            w_o: w(rng),
            b_o: b(),
            head_count,
        })
    }

    pub fn model_width(&self) -> usize {
        self.w_q.matrix_dims().1
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_width();
        if self.head_count == 0 || d % self.head_count != 0 {
            return Err(Error::shape(
                "attention head partition",
                "width divisible by head_count",
                format!("width {d}, heads {}", self.head_count),
            ));
        }
        for (name, t, rows, cols) in [
            ("w_q", &self.w_q, d, d),
            ("w_k", &self.w_k, d, d),
            ("w_v", &self.w_v, d, d),
            ("w_o", &self.w_o, d, d),
            ("b_q", &self.b_q, 1, d),
            ("b_k", &self.b_k, 1, d),
            ("b_v", &self.b_v, 1, d),
            ("b_o", &self.b_o, 1, d),
        ] {
            let (r, c) = t.matrix_dims();
            if (r, c) != (rows, cols) {
                return Err(Error::shape(name, format!("{rows}x{cols}"), format!("{r}x{c}")));
            }
        }
        Ok(())
    }
}

/// Tape handles for one attention block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub head_count: usize,
}

impl AttentionVars {
    pub fn leaves(tape: &mut Tape, params: &AttentionParams) -> Self {
        AttentionVars {
            w_q: tape.leaf(&params.w_q),
            b_q: tape.leaf(&params.b_q),
            w_k: tape.leaf(&params.w_k),
            b_k: tape.leaf(&params.b_k),
            w_v: tape.leaf(&params.w_v),
            b_v: tape.leaf(&params.b_v),
            w_o: tape.leaf(&params.w_o),
            b_o: tape.leaf(&params.b_o),
            head_count: params.head_count,
        }
    }
}

/// Full attention graph: project, split heads, scaled softmax(QKᵀ)·V per
/// head, re-join, project out. Attends every query to every key (no mask).
pub fn attention_graph(tape: &mut Tape, p: &AttentionVars, queries: Var, keys: Var, values: Var) -> Var {
    let d = tape.cols(p.w_q);
    assert_eq!(tape.cols(queries), d, "query width mismatch");
    assert_eq!(tape.cols(keys), d, "key width mismatch");
    assert_eq!(tape.cols(values), d, "value width mismatch");
    assert_eq!(tape.rows(keys), tape.rows(values), "key/value length mismatch");
    let head_width = d / p.head_count;
    let scale = 1.0 / (head_width as f64).sqrt();

    let q_all = tape.matmul(queries, p.w_q);
    let q_all = tape.add_bias(q_all, p.b_q);
    let k_all = tape.matmul(keys, p.w_k);
    let k_all = tape.add_bias(k_all, p.b_k);
    let v_all = tape.matmul(values, p.w_v);
    let v_all = tape.add_bias(v_all, p.b_v);

    let mut head_outputs = Vec::with_capacity(p.head_count);
    for h in 0..p.head_count {
        let q = tape.slice_cols(q_all, h * head_width, head_width);
        let k = tape.slice_cols(k_all, h * head_width, head_width);
        let v = tape.slice_cols(v_all, h * head_width, head_width);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        head_outputs.push(tape.matmul(weights, v));
    }
    let joined = tape.concat_cols(&head_outputs);
    let out = tape.matmul(joined, p.w_o);
    tape.add_bias(out, p.b_o)
}

/// Host-level attention over plain tensors: shape-checks, runs the graph once,
/// and returns the output sequence.
pub fn multi_head_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor> {
    params.validate()?;
    let d = params.model_width();
    for (name, t) in [("queries", queries), ("keys", keys), ("values", values)] {
        let (_, c) = t.matrix_dims();
        if c != d {
            return Err(Error::shape(name, format!("width {d}"), format!("width {c}")));
        }
    }
    let (kn, _) = keys.matrix_dims();
    let (vn, _) = values.matrix_dims();
    if kn != vn {
        return Err(Error::shape("keys/values", format!("{kn} rows"), format!("{vn} rows")));
    }
    let mut tape = Tape::new();
    let p = AttentionVars::leaves(&mut tape, params);
    let q = tape.leaf(queries);
    let k = tape.leaf(keys);
    let v = tape.leaf(values);
    let out = attention_graph(&mut tape, &p, q, k, v);
    let result = tape.tensor_value(out);
    if !result.is_finite() {
        return Err(Error::Numeric("attention produced non-finite values".into()));
    }
    Ok(result)
}
