//! Composite layers built from tape primitives.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Large negative logit used to mask attention scores.
pub const MASK_VALUE: f64 = -1e9;

/// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// Additive causal mask for `len` positions: `0` on and below the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros([len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = MASK_VALUE;
        }
    }
    m
}

/// `softmax(q kᵀ / √d_k + mask) v` for single-head inputs
/// `q: [tq, dk]`, `k: [tk, dk]`, `v: [tk, dv]`.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let dk = tape.value(q).last_dim() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / dk.sqrt());
    if let Some(mask) = mask {
        scores = tape.add_const(scores, mask)?;
    }
    let attn = tape.softmax(scores, 1)?;
    tape.matmul(attn, v)
}

/// Cosine similarity along the last axis; `eps` guards zero vectors.
pub fn cosine_similarity(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
    let na = tape.l2_normalize(a, eps);
    let nb = tape.l2_normalize(b, eps);
    let prod = tape.mul(na, nb)?;
    let axis = tape.value(prod).rank().saturating_sub(1);
    tape.sum_axis(prod, axis)
}

/// Inverted dropout. `rate == 0` returns `x` unchanged.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::new(shape, mask)?;
    tape.mul_const(x, &mask)
}
