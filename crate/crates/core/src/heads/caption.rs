use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::vocab::{BOS, CLS, EOS, MASK_ATOM, PAD, RESERVED};
use crate::encoders::{encode_geometry, GeomEncoderConfig};
use crate::error::{Error, Result};
use crate::molio::Molecule;
use crate::nn::{self, ScoreBias};
use crate::tensor::{Binder, ModelParams, ParamKind, Tape, Tensor, Var, MASKED_LOGIT};

/// Prefix used when the geometric encoder is held fixed during captioning.
pub const GEOM_PREFIX: &str = "geom.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionConfig {
    /// Number of prefix vectors produced from the molecule embedding.
    pub prefix_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Longest token sequence, `[BOS]` and `[EOS]` included.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Keep the geometric encoder fixed and train only the decoder side.
    pub freeze_encoder: bool,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig {
            prefix_len: 4,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            max_seq_len: 64,
            vocab_size: RESERVED.len(),
            freeze_encoder: false,
        }
    }
}

impl CaptionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("caption decoder: {m}")));
        if self.prefix_len == 0 {
            return bad("prefix_len must be at least 1");
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return bad("embed_dim must be a positive multiple of num_heads");
        }
        if self.max_seq_len < 2 || self.vocab_size <= RESERVED.len() {
            return bad("max_seq_len must be ≥ 2 and the vocabulary must hold words");
        }
        Ok(())
    }

    pub fn init_params(
        &self,
        geom: &GeomEncoderConfig,
        params: &mut ModelParams,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.validate()?;
        let d = self.embed_dim;
        nn::init_mlp(
            params,
            "caption.prefix",
            (geom.proj_dim, d, self.prefix_len * d),
            rng,
        )?;
        params.init(
            "caption.token_embed",
            vec![self.vocab_size, d],
            ParamKind::Embedding,
            rng,
        )?;
        params.init(
            "caption.pos_embed",
            vec![self.prefix_len + self.max_seq_len, d],
            ParamKind::Embedding,
            rng,
        )?;
        for l in 0..self.num_layers {
            nn::init_block(params, &format!("caption.layer{l}"), d, rng)?;
        }
        nn::init_layer_norm(params, "caption.ln_f", d, rng)?;
        nn::init_linear(
            params,
            "caption.out.w",
            "caption.out.b",
            d,
            self.vocab_size,
            rng,
        )
    }

    /// Binder for caption training, honouring `freeze_encoder`.
    pub fn binder<'p>(&self, params: &'p ModelParams) -> Binder<'p> {
        if self.freeze_encoder {
            Binder::with_frozen(params, &[GEOM_PREFIX])
        } else {
            Binder::new(params)
        }
    }
}

/// Prefix vectors attend to each other; token `j` sees the prefix and
/// tokens up to `j`.
fn prefix_causal_mask(k: usize, len: usize) -> Tensor {
    let total = k + len;
    let mut m = vec![0.0; total * total];
    for i in 0..total {
        for j in k.max(i + 1)..total {
            m[i * total + j] = MASKED_LOGIT;
        }
    }
    Tensor::matrix(total, total, m).expect("mask shape")
}

/// Next-token logits `[L, V]` for each position of `tokens`, conditioned on
/// the molecule embedding `g` (`[1, proj_dim]`).
pub fn decoder_logits(
    tape: &Tape,
    p: &Binder,
    cfg: &CaptionConfig,
    g: Var,
    tokens: &[usize],
) -> Result<Var> {
    let (k, d, len) = (cfg.prefix_len, cfg.embed_dim, tokens.len());
    if len == 0 || len > cfg.max_seq_len {
        return Err(Error::contract(format!(
            "caption length {len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {t} outside 0..{}",
            cfg.vocab_size
        )));
    }
    let prefix = tape.reshape(nn::mlp(tape, p, g, "caption.prefix")?, vec![k, d])?;
    let tok = tape.gather_rows(p.get(tape, "caption.token_embed")?, tokens)?;
    let positions: Vec<usize> = (0..k + len).collect();
    let pos = tape.gather_rows(p.get(tape, "caption.pos_embed")?, &positions)?;
    let mut x = tape.add(tape.concat_rows(&[prefix, tok])?, pos)?;
    let mask = tape.constant(&prefix_causal_mask(k, len));
    for l in 0..cfg.num_layers {
        x = nn::block(
            tape,
            p,
            x,
            &format!("caption.layer{l}"),
            cfg.num_heads,
            &ScoreBias::None,
            Some(mask),
        )?;
    }
    let h = nn::layer_norm(tape, p, tape.slice_rows(x, k..k + len)?, "caption.ln_f")?;
    nn::linear(tape, p, h, "caption.out.w", "caption.out.b")
}

/// Mean next-token cross-entropy of a `[BOS] … [EOS]` sequence given the molecule.
pub fn caption_teacher_forced_loss(
    tape: &Tape,
    p: &Binder,
    geom: &GeomEncoderConfig,
    cfg: &CaptionConfig,
    m: &Molecule,
    seq: &[usize],
) -> Result<Var> {
    if seq.len() < 2 || seq[0] != BOS || seq[seq.len() - 1] != EOS {
        return Err(Error::contract(
            "caption sequences must start with [BOS] and end with [EOS]",
        ));
    }
    if seq.len() > cfg.max_seq_len {
        return Err(Error::contract(format!(
            "caption of {} tokens exceeds max_seq_len {}",
            seq.len(),
            cfg.max_seq_len
        )));
    }
    let g = encode_geometry(tape, p, geom, m)?.embedding;
    let logits = decoder_logits(tape, p, cfg, g, &seq[..seq.len() - 1])?;
    tape.cross_entropy(logits, &seq[1..])
}

/// `[BOS]` followed by the words of `ids` and `[EOS]`, dropping `[CLS]`
/// and padding.
pub fn caption_sequence(ids: &[usize], cfg: &CaptionConfig) -> Vec<usize> {
    let mut seq = vec![BOS];
    seq.extend(
        ids.iter()
            .copied()
            .filter(|&i| i != CLS && i != PAD)
            .take(cfg.max_seq_len - 2),
    );
    seq.push(EOS);
    seq
}

/// Greedy decoding from `[BOS]` until `[EOS]` or `max_len` tokens. Reserved
/// tokens other than `[EOS]` and `[UNK]` are never emitted; ties go to the
/// lower id.
pub fn caption_generate(
    params: &ModelParams,
    geom: &GeomEncoderConfig,
    cfg: &CaptionConfig,
    m: &Molecule,
    max_len: usize,
) -> Result<Vec<usize>> {
    let max_len = max_len.min(cfg.max_seq_len);
    let g = {
        let tape = Tape::new();
        let enc = encode_geometry(&tape, &Binder::new(params), geom, m)?;
        tape.value(enc.embedding)
    };
    let mut seq = vec![BOS];
    while seq.len() < max_len {
        let tape = Tape::new();
        let binder = Binder::new(params);
        let logits = decoder_logits(&tape, &binder, cfg, tape.constant(&g), &seq)?;
        let v = tape.value(logits);
        let last = v.row(seq.len() - 1);
        let next = last
            .iter()
            .enumerate()
            .filter(|&(i, _)| !matches!(i, PAD | CLS | BOS | MASK_ATOM))
            .fold((EOS, f64::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            })
            .0;
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}
