//! Composite operations built from tape primitives.

use crate::error::{config_err, dim_err, Result};
use crate::tape::{Tape, Var};

/// Guard used for zero-norm vectors in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Query, key, value and output projections (each `d×d`) with biases.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q_in` is `[..., Lq, d]` and `kv_in` is `[..., Lk, d]` with identical
/// leading dimensions. With `causal`, query `i` attends to keys `j <= i`
/// (requires `Lq == Lk`).
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q_in: Var,
    kv_in: Var,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let qs = tape.shape(q_in).to_vec();
    let ks = tape.shape(kv_in).to_vec();
    let r = qs.len();
    if r < 2 || ks.len() != r || qs[..r - 2] != ks[..r - 2] || qs[r - 1] != ks[r - 1] {
        return Err(dim_err("multi_head_attention", &qs, &ks));
    }
    let d = qs[r - 1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(config_err(
            "multi_head_attention",
            format!("width {d} is not divisible by {heads} heads"),
        ));
    }
    let (lq, lk, dh) = (qs[r - 2], ks[r - 2], d / heads);
    if causal && lq != lk {
        return Err(dim_err("causal attention", &qs, &ks));
    }
    let groups: usize = qs[..r - 2].iter().product();

    let split = |tape: &mut Tape<'_>, x: Var, wt: Var, b: Var, len: usize| -> Result<Var> {
        let y = tape.linear(x, wt, Some(b))?;
        let y = tape.reshape(y, [groups, len, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, q_in, w.wq, w.bq, lq)?;
    let k = split(tape, kv_in, w.wk, w.bk, lk)?;
    let v = split(tape, kv_in, w.wv, w.bv, lk)?;

    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax(scores)?
    };
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, qs.clone())?;
    tape.linear(ctx, w.wo, Some(w.bo))
}

/// Pairwise cosine similarities between the rows of `a[n, d]` and `b[m, d]`,
/// giving `[n, m]`.
pub fn cosine_matrix(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let an = tape.normalize(a, COSINE_EPS)?;
    let bn = tape.normalize(b, COSINE_EPS)?;
    tape.matmul_nt(an, bn)
}

/// Cosine similarity of two vectors of equal length, as a scalar node.
pub fn cosine_similarity(tape: &mut Tape<'_>, u: Var, v: Var) -> Result<Var> {
    let n = tape.value(u).len();
    if tape.value(v).len() != n {
        return Err(dim_err("cosine_similarity", tape.shape(u), tape.shape(v)));
    }
    let u2 = tape.reshape(u, [1, n])?;
    let v2 = tape.reshape(v, [1, n])?;
    let m = cosine_matrix(tape, u2, v2)?;
    tape.reshape(m, Vec::new())
}
