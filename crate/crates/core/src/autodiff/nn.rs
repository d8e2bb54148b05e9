//! Composite layers built from graph primitives.

use super::graph::{Graph, Var};
use super::tensor::Real;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// `x · weight + bias` for `x: [N, Cin]`, `weight: [Cin, Cout]`, `bias: [Cout]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_bias(y, bias)
}

/// Projection weights of one multi-head attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Output of [`multi_head_attention`] together with the per-head attention
/// maps (`[Nq, Nk]`, rows summing to one).
#[derive(Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` equal channel groups.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    p: &AttentionParams,
) -> Result<Attended> {
    let c = g.shape(q)[1];
    if heads == 0 || c % heads != 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "multi_head_attention",
            msg: format!("channel count {c} is not divisible by {heads} heads"),
        });
    }
    if g.shape(k) != g.shape(v) || g.shape(k)[1] != c {
        return Err(AutodiffError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let d = c / heads;
    let scale = T::one() / T::from_usize(d).expect("head width").sqrt();
    let qp = linear(g, q, p.wq, p.bq)?;
    let kp = linear(g, k, p.wk, p.bk)?;
    let vp = linear(g, v, p.wv, p.bv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(qp, h * d, d)?;
        let kh = g.slice_cols(kp, h * d, d)?;
        let vh = g.slice_cols(vp, h * d, d)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax(scores, 1)?;
        weights.push(attn);
        outs.push(g.matmul(attn, vh)?);
    }
    let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = linear(g, joined, p.wo, p.bo)?;
    Ok(Attended { output, weights })
}

/// Position-wise two-layer perceptron with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn feed_forward<T: Real>(g: &mut Graph<T>, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let h = linear(g, x, p.w1, p.b1)?;
    let h = g.gelu(h)?;
    linear(g, h, p.w2, p.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `LN(sublayer + residual)`, the post-norm residual of a transformer layer.
pub fn add_norm<T: Real>(g: &mut Graph<T>, sublayer: Var, residual: Var, n: &NormParams) -> Result<Var> {
    let s = g.add(sublayer, residual)?;
    g.layer_norm(s, n.gain, n.bias, LAYER_NORM_EPS)
}
