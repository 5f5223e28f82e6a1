//! Attention and encoder layers assembled from tape primitives.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const LN_EPS: f64 = 1e-5;

/// Projection weights of one attention block, all `[D × D]` plus `[D]` biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttentionVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

/// Scaled dot-product attention split over `heads`, concatenated and projected.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let (_, d) = tape.value(q_in).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = tape.linear(q_in, p.wq, p.bq)?;
    let k = tape.linear(k_in, p.wk, p.bk)?;
    let v = tape.linear(v_in, p.wv, p.bv)?;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.linear(cat, p.wo, p.bo)
}

/// Pre-norm encoder layer: `h = x + MHA(LN(x))`, `out = h + FFN(LN(h))`.
/// With `positional`, sinusoidal encodings are added to `x` first.
pub fn transformer_encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &EncoderLayerVars,
    heads: usize,
    positional: bool,
) -> Result<Var> {
    let (t, d) = tape.value(x).dims2()?;
    let x = if positional {
        let pe = tape.constant(sinusoidal_positions(t, d));
        tape.add(x, pe)?
    } else {
        x
    };
    let eps = T::lit(LN_EPS);
    let n1 = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta, eps)?;
    let a = multi_head_attention(tape, n1, n1, n1, &p.attn, heads)?;
    let h = tape.add(x, a)?;
    let n2 = tape.layer_norm(h, p.ln2_gamma, p.ln2_beta, eps)?;
    let f = tape.linear(n2, p.ff1_w, p.ff1_b)?;
    let f = tape.relu(f)?;
    let f = tape.linear(f, p.ff2_w, p.ff2_b)?;
    tape.add(h, f)
}

/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<T: Real>(t: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new([t, d], data).expect("positional table shape")
}
