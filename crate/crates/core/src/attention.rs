//! Scaled dot-product attention on the autograd tape.

use ndarray::Array2;

use crate::autograd::{Graph, Var};

/// Result of one attention call: the attended values (before any residual)
/// and the row-stochastic weight matrix.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// `0/1` matrix selecting columns `[h*d, (h+1)*d)` of a `C`-wide input.
fn head_selector(dim: usize, heads: usize, h: usize) -> Array2<f64> {
    let d = dim / heads;
    Array2::from_shape_fn((dim, d), |(i, j)| if i == h * d + j { 1.0 } else { 0.0 })
}

/// `softmax(q kᵀ * scale) v`, split into `heads` groups of columns. Queries
/// enter unprojected; `keys` and `values` are already projected.
pub fn attend(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
    scale: f64,
) -> Attended {
    if heads <= 1 {
        let logits = g.matmul_t(queries, keys);
        let logits = g.scale(logits, scale);
        let w = g.softmax_rows(logits);
        let out = g.matmul(w, values);
        return Attended {
            out,
            weights: vec![w],
        };
    }
    let dim = g.value(queries).ncols();
    assert_eq!(
        dim % heads,
        0,
        "channel count {dim} not divisible by {heads} heads"
    );
    let mut out = None;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let sel = g.constant(head_selector(dim, heads, h));
        let qh = g.matmul(queries, sel);
        let kh = g.matmul(keys, sel);
        let vh = g.matmul(values, sel);
        let logits = g.matmul_t(qh, kh);
        let logits = g.scale(logits, scale);
        let w = g.softmax_rows(logits);
        let oh = g.matmul(w, vh);
        // scatter back into the head's columns
        let back = g.matmul_t(oh, sel);
        out = Some(match out {
            None => back,
            Some(acc) => g.add(acc, back),
        });
        weights.push(w);
    }
    Attended {
        out: out.expect("heads >= 1"),
        weights,
    }
}

pub fn logit_scale(dim: usize, literal_unscaled: bool) -> f64 {
    if literal_unscaled {
        1.0
    } else {
        1.0 / (dim as f64).sqrt()
    }
}
