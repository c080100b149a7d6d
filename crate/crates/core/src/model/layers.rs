//! Building blocks of the forward pass, expressed on tape variables so each
//! can be exercised in isolation.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var, LAYER_NORM_EPS};

/// `x·w + b` over the last axis.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

/// Positionwise `F → C` map of a `[B, M, N, F]` input.
pub fn input_projection(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(x).len() != 4 {
        return Err(Error::dim("input_projection", tape.shape(x), tape.shape(w)));
    }
    affine(tape, x, w, b)
}

/// Adds `t_enc: [M,1,C]` and `s_enc: [1,N,C]` to `x: [B,M,N,C]`.
pub fn add_encodings(tape: &mut Tape, x: Var, t_enc: Var, s_enc: Var) -> Result<Var> {
    let y = tape.add_broadcast(x, t_enc)?;
    tape.add_broadcast(y, s_enc)
}

/// One attention head over `[.., R, C]` rows: `softmax(QKᵀ/√d)·V`.
pub fn attention_head(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let d = tape.shape(wq)[1];
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    tape.attention(q, k, v, 1.0 / (d as f64).sqrt())
}

/// `ReLU(a·x·w + b)` for `x: [R, C]` or `[B, R, C]` and `a: [R, R]`.
pub fn gcn_layer(tape: &mut Tape, x: Var, a: Var, w: Var, b: Var) -> Result<Var> {
    let ax = tape.matmul(a, x)?;
    let y = affine(tape, ax, w, b)?;
    Ok(tape.relu(y))
}

/// Per-block parameter handles on a tape.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    /// `(W_Q, W_K, W_V)` per head.
    pub heads: Vec<(Var, Var, Var)>,
    pub merge: (Var, Var),
    pub ln2: (Var, Var),
    pub mlp: Vec<(Var, Var)>,
    pub gcn: (Var, Var),
}

/// Attention sublayer and MLP sublayer, each with a residual, on `[B, R, C]`.
/// Returns the output and the attention nodes (one per head).
pub fn stst_block(tape: &mut Tape, x: Var, p: &BlockVars) -> Result<(Var, Vec<Var>)> {
    let h = tape.layer_norm(x, p.ln1.0, p.ln1.1, LAYER_NORM_EPS)?;
    let mut outs = Vec::with_capacity(p.heads.len());
    for &(wq, wk, wv) in &p.heads {
        outs.push(attention_head(tape, h, wq, wk, wv)?);
    }
    let cat = tape.concat_last(&outs)?;
    let merged = affine(tape, cat, p.merge.0, p.merge.1)?;
    let x1 = tape.add(x, merged)?;

    let mut m = tape.layer_norm(x1, p.ln2.0, p.ln2.1, LAYER_NORM_EPS)?;
    for (i, &(w, b)) in p.mlp.iter().enumerate() {
        m = affine(tape, m, w, b)?;
        if i + 1 < p.mlp.len() {
            m = tape.relu(m);
        }
    }
    let out = if tape.shape(m) == tape.shape(x1) { tape.add(x1, m)? } else { m };
    Ok((out, outs))
}

/// `[B, M, N, C] → [B, H, N]` via `ReLU(flat·W1 + b1)·W2 + b2` per vertex.
pub fn output_head(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("output_head", &s, tape.shape(w1)));
    }
    let (b, m, n, c) = (s[0], s[1], s[2], s[3]);
    let xt = tape.permute(x, &[0, 2, 1, 3])?;
    let flat = tape.reshape(xt, &[b, n, m * c])?;
    let hidden = affine(tape, flat, w1, b1)?;
    let hidden = tape.relu(hidden);
    let y = affine(tape, hidden, w2, b2)?;
    tape.permute(y, &[0, 2, 1])
}
