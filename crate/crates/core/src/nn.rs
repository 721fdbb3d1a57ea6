//! Layers shared by the encoders and heads: affine maps, layer norm and
//! pre-norm transformer blocks, all expressed as tape ops.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Binder, ModelParams, ParamKind, Tape, Tensor, Var, MASKED_LOGIT};

pub(crate) fn init_linear(
    params: &mut ModelParams,
    w: &str,
    b: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init(w, vec![fan_in, fan_out], ParamKind::Weight, rng)?;
    params.init(b, vec![fan_out], ParamKind::Bias, rng)
}

pub(crate) fn init_layer_norm(
    params: &mut ModelParams,
    prefix: &str,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    params.init(format!("{prefix}.gamma"), vec![dim], ParamKind::Norm, rng)?;
    params.insert(
        format!("{prefix}.beta"),
        Tensor::zeros(vec![dim]),
        ParamKind::Norm,
    )
}

/// Registers the parameters of one pre-norm block under `prefix`.
pub(crate) fn init_block(
    params: &mut ModelParams,
    prefix: &str,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_layer_norm(params, &format!("{prefix}.ln1"), dim, rng)?;
    for m in ["q", "k", "v", "o"] {
        init_linear(
            params,
            &format!("{prefix}.attn.w{m}"),
            &format!("{prefix}.attn.b{m}"),
            dim,
            dim,
            rng,
        )?;
    }
    init_layer_norm(params, &format!("{prefix}.ln2"), dim, rng)?;
    init_linear(
        params,
        &format!("{prefix}.ffn.w1"),
        &format!("{prefix}.ffn.b1"),
        dim,
        2 * dim,
        rng,
    )?;
    init_linear(
        params,
        &format!("{prefix}.ffn.w2"),
        &format!("{prefix}.ffn.b2"),
        2 * dim,
        dim,
        rng,
    )
}

/// `x·W + b` for a row-major batch `x`.
pub(crate) fn linear(tape: &Tape, p: &Binder, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, p.get(tape, w)?)?;
    tape.add(y, p.get(tape, b)?)
}

pub(crate) fn layer_norm(tape: &Tape, p: &Binder, x: Var, prefix: &str) -> Result<Var> {
    let n = tape.layer_norm(x);
    let n = tape.mul(n, p.get(tape, &format!("{prefix}.gamma"))?)?;
    tape.add(n, p.get(tape, &format!("{prefix}.beta"))?)
}

/// Additive `[L, L]` mask: key columns listed in `blocked` get a large
/// negative logit, and with `causal` so does every key after its query.
pub(crate) fn attention_mask(len: usize, blocked: &[bool], causal: bool) -> Option<Tensor> {
    if !causal && !blocked.iter().any(|&b| b) {
        return None;
    }
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            if blocked.get(j).copied().unwrap_or(false) || (causal && j > i) {
                m[i * len + j] = MASKED_LOGIT;
            }
        }
    }
    Some(Tensor::matrix(len, len, m).expect("mask shape"))
}

/// Extra logits added to attention scores, one matrix per head.
pub(crate) enum ScoreBias<'a> {
    None,
    PerHead(&'a [Var]),
}

impl ScoreBias<'_> {
    fn for_head(&self, h: usize) -> Option<Var> {
        match self {
            ScoreBias::None => None,
            ScoreBias::PerHead(vs) => Some(vs[h]),
        }
    }
}

/// Multi-head self-attention over the rows of `x`.
pub(crate) fn self_attention(
    tape: &Tape,
    p: &Binder,
    x: Var,
    prefix: &str,
    heads: usize,
    bias: &ScoreBias<'_>,
    mask: Option<Var>,
) -> Result<Var> {
    let dim = tape.shape(x)[1];
    let dh = dim / heads;
    let q = linear(tape, p, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(tape, p, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(tape, p, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = tape.slice_cols(q, cols.clone())?;
        let kh = tape.slice_cols(k, cols.clone())?;
        let vh = tape.slice_cols(v, cols)?;
        let mut s = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale);
        if let Some(b) = bias.for_head(h) {
            s = tape.add(s, b)?;
        }
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        outs.push(tape.matmul(tape.softmax(s), vh)?);
    }
    let o = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, p, o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Pre-norm transformer block: attention and a GELU feed-forward layer,
/// each wrapped in a residual connection.
pub(crate) fn block(
    tape: &Tape,
    p: &Binder,
    x: Var,
    prefix: &str,
    heads: usize,
    bias: &ScoreBias<'_>,
    mask: Option<Var>,
) -> Result<Var> {
    let h = layer_norm(tape, p, x, &format!("{prefix}.ln1"))?;
    let a = self_attention(tape, p, h, &format!("{prefix}.attn"), heads, bias, mask)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, p, x, &format!("{prefix}.ln2"))?;
    let f = linear(
        tape,
        p,
        h,
        &format!("{prefix}.ffn.w1"),
        &format!("{prefix}.ffn.b1"),
    )?;
    let f = linear(
        tape,
        p,
        tape.gelu(f),
        &format!("{prefix}.ffn.w2"),
        &format!("{prefix}.ffn.b2"),
    )?;
    tape.add(x, f)
}

/// Two-layer MLP `w2·gelu(w1·x + b1) + b2` under `prefix`.
pub(crate) fn mlp(tape: &Tape, p: &Binder, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, p, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    linear(
        tape,
        p,
        tape.gelu(h),
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
    )
}

pub(crate) fn init_mlp(
    params: &mut ModelParams,
    prefix: &str,
    dims: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(
        params,
        &format!("{prefix}.w1"),
        &format!("{prefix}.b1"),
        dims.0,
        dims.1,
        rng,
    )?;
    init_linear(
        params,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
        dims.1,
        dims.2,
        rng,
    )
}
