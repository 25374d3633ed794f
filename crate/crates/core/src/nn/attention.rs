use crate::error::{Error, Result};
use crate::tensor::{EmptyRows, Graph, Var};

/// Single-head scaled dot-product attention over an unordered key set.
///
/// `query [d]`, `keys [n, d]`, `values [n, dv]`, `mask [n]` (true = attend).
pub fn attention(g: &mut Graph, query: Var, keys: Var, values: Var, mask: &[bool]) -> Result<Var> {
    let (&[d], &[n, d2], &[n2, dv]) = (g.shape(query), g.shape(keys), g.shape(values)) else {
        return Err(Error::shape(format!(
            "attention expects [d], [n,d], [n,dv]; got {:?}, {:?}, {:?}",
            g.shape(query),
            g.shape(keys),
            g.shape(values)
        )));
    };
    if d != d2 || n != n2 {
        return Err(Error::shape(format!("attention: query {d}, keys {n}x{d2}, values {n2}x{dv}")));
    }
    let q = g.reshape(query, &[1, d])?;
    let k = g.reshape(keys, &[1, n, d])?;
    let v = g.reshape(values, &[1, n, dv])?;
    let out = batched_attention(g, q, k, v, mask, EmptyRows::Error)?;
    g.reshape(out, &[dv])
}

/// Batched form: `query [B, d]`, `keys [B, N, d]`, `values [B, N, dv]`,
/// `mask` of length `B*N`. Fully masked rows either error or yield zeros.
pub fn batched_attention(
    g: &mut Graph,
    query: Var,
    keys: Var,
    values: Var,
    mask: &[bool],
    empty: EmptyRows,
) -> Result<Var> {
    let d = g.shape(query)[1] as f64;
    let scores = g.row_dot(keys, query)?;
    let scores = g.scale(scores, 1.0 / d.sqrt())?;
    let weights = g.softmax(scores, Some(mask), empty)?;
    g.weighted_sum(weights, values)
}
