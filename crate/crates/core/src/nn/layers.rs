//! Composite blocks recorded on a [`Graph`].

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// `x W + b`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Single-head self-attention `softmax((X W_Q)(X W_K)^T / sqrt(d_k)) (X W_V)`.
pub fn attention(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    cross_attention(g, x, x, wq, wk, wv)
}

/// Single-head attention with queries from `q_src` and keys/values from `kv_src`.
pub fn cross_attention(g: &mut Graph, q_src: Var, kv_src: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let q = g.matmul(q_src, wq)?;
    let k = g.matmul(kv_src, wk)?;
    let v = g.matmul(kv_src, wv)?;
    scaled_dot_product(g, q, k, v, 1)
}

/// Attention over `blocks` independent sequences stacked along rows.
pub fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var, blocks: usize) -> Result<Var> {
    let dk = g.shape(q).1;
    if dk == 0 {
        return Err(Error::InvalidShape("attention key width must be >= 1".into()));
    }
    let scores = g.matmul_blocks(q, k, true, blocks)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = g.softmax_rows(scores);
    g.matmul_blocks(attn, v, false, blocks)
}

/// Projections of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head attention over `blocks` stacked sequences. Heads split the
/// projected width evenly; their outputs are concatenated and mixed by `wo`.
pub fn multi_head(g: &mut Graph, q_src: Var, kv_src: Var, w: &AttnWeights, heads: usize, blocks: usize) -> Result<Var> {
    let q = g.matmul(q_src, w.wq)?;
    let k = g.matmul(kv_src, w.wk)?;
    let v = g.matmul(kv_src, w.wv)?;
    let width = g.shape(q).1;
    if heads == 0 || width % heads != 0 {
        return Err(Error::InvalidShape(format!("width {width} not divisible into {heads} heads")));
    }
    let hd = width / heads;
    let out = if heads == 1 {
        scaled_dot_product(g, q, k, v, blocks)?
    } else {
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            parts.push(scaled_dot_product(g, qh, kh, vh, blocks)?);
        }
        g.concat_cols(&parts)?
    };
    g.matmul(out, w.wo)
}
