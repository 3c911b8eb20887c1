//! Composite layers built on the tape primitives.

use crate::error::{NumError, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Output of [`multihead_attention`].
#[derive(Debug, Clone)]
pub struct Attention {
    /// `n_q × d` concatenation of per-head outputs.
    pub output: Var,
    /// One `n_q × n_k` row-stochastic weight matrix per head.
    pub weights: Vec<Tensor>,
}

/// Scaled dot-product attention split across `n_heads` column blocks.
///
/// `queries` is `n_q × d`, `keys` and `values` are `n_k × d`; `d` must be a
/// multiple of `n_heads`.
pub fn multihead_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    n_heads: usize,
) -> Result<Attention> {
    let (nq, d) = g.shape(queries);
    let (nk, dk) = g.shape(keys);
    let (nv, dv) = g.shape(values);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NumError::ShapeMismatch {
            op: "multihead_attention",
            detail: format!("model dim {d} not divisible by {n_heads} heads"),
        });
    }
    if dk != d || dv != d || nk != nv {
        return Err(NumError::ShapeMismatch {
            op: "multihead_attention",
            detail: format!("q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}"),
        });
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let q = g.slice_cols(queries, lo, hi)?;
        let k = g.slice_cols(keys, lo, hi)?;
        let v = g.slice_cols(values, lo, hi)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores)?;
        weights.push(g.value(attn).clone());
        heads.push(g.matmul(attn, v)?);
    }
    let output = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(Attention { output, weights })
}
