use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{PAD, RESERVED};
use crate::error::{Error, Result};
use crate::nn::{self, ScoreBias};
use crate::tensor::{Binder, ModelParams, ParamKind, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub token_embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub proj_dim: usize,
    /// Hidden width of the projection MLP.
    pub proj_hidden: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: RESERVED.len(),
            token_embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            max_seq_len: 64,
            proj_dim: 512,
            proj_hidden: 512,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("text encoder: {m}")));
        if self.token_embed_dim == 0
            || self.num_heads == 0
            || !self.token_embed_dim.is_multiple_of(self.num_heads)
        {
            return bad("token_embed_dim must be a positive multiple of num_heads");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must leave room for [CLS] and one token");
        }
        if self.vocab_size < RESERVED.len() {
            return bad("vocab_size smaller than the reserved tokens");
        }
        if self.proj_dim == 0 || self.proj_hidden == 0 {
            return bad("proj_dim and proj_hidden must be positive");
        }
        Ok(())
    }

    pub fn init_params(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let d = self.token_embed_dim;
        params.init(
            "text.token_embed",
            vec![self.vocab_size, d],
            ParamKind::Embedding,
            rng,
        )?;
        params.init(
            "text.pos_embed",
            vec![self.max_seq_len, d],
            ParamKind::Embedding,
            rng,
        )?;
        for l in 0..self.num_layers {
            nn::init_block(params, &format!("text.layer{l}"), d, rng)?;
        }
        nn::init_layer_norm(params, "text.ln_f", d, rng)?;
        nn::init_mlp(
            params,
            "text.proj",
            (d, self.proj_hidden, self.proj_dim),
            rng,
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TextEncoding {
    /// Final token representations `[L, d]`.
    pub tokens: Var,
    /// Representation at the `[CLS]` position `[1, d]`.
    pub cls: Var,
    /// Projected embedding `[1, proj_dim]`.
    pub embedding: Var,
}

/// Final token representations `[L, d]` and the `[CLS]` row `[1, d]` of a
/// `[CLS]`-prefixed id sequence, before the projection. `[PAD]` positions
/// are masked out of attention and cannot affect the result.
pub fn token_features(
    tape: &Tape,
    p: &Binder,
    cfg: &TextEncoderConfig,
    ids: &[usize],
) -> Result<(Var, Var)> {
    let len = ids.len();
    if len == 0 || len > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "sequence length {len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} outside 0..{}",
            cfg.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..len).collect();
    let tok = tape.gather_rows(p.get(tape, "text.token_embed")?, ids)?;
    let pos = tape.gather_rows(p.get(tape, "text.pos_embed")?, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let blocked: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    let mask = nn::attention_mask(len, &blocked, false).map(|m| tape.constant(&m));
    for l in 0..cfg.num_layers {
        x = nn::block(
            tape,
            p,
            x,
            &format!("text.layer{l}"),
            cfg.num_heads,
            &ScoreBias::None,
            mask,
        )?;
    }
    let tokens = nn::layer_norm(tape, p, x, "text.ln_f")?;
    let cls = tape.slice_rows(tokens, 0..1)?;
    Ok((tokens, cls))
}

/// Projection MLP into the shared space, applied row-wise to `[B, d]`.
pub fn project_text(tape: &Tape, p: &Binder, cls: Var) -> Result<Var> {
    nn::mlp(tape, p, cls, "text.proj")
}

pub fn encode_text(
    tape: &Tape,
    p: &Binder,
    cfg: &TextEncoderConfig,
    ids: &[usize],
) -> Result<TextEncoding> {
    let (tokens, cls) = token_features(tape, p, cfg, ids)?;
    let embedding = project_text(tape, p, cls)?;
    Ok(TextEncoding {
        tokens,
        cls,
        embedding,
    })
}

/// Embedding `t` of a token sequence, evaluated outside any training tape.
pub fn embed_text(
    params: &ModelParams,
    cfg: &TextEncoderConfig,
    ids: &[usize],
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let binder = Binder::new(params);
    let enc = encode_text(&tape, &binder, cfg, ids)?;
    Ok(tape.data(enc.embedding).to_vec())
}
