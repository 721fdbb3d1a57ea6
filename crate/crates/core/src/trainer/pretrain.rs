use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{adam_step, lr_at, AdamState, ModelConfig, TrainConfig};
use crate::encoders::{
    atom_features, atom_type_ids, project_geometry, project_text, token_features, tokenize, Vocab,
};
use crate::error::{Error, Result};
use crate::heads::predict_masked;
use crate::molio::GeomTextPair;
use crate::objectives::{contrastive_loss, corrupt, denoising_loss_sum};
use crate::tensor::{add_grads, Binder, GradMap, ModelParams, Tape, Tensor, Var};

/// One optimizer step of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub l_con: f64,
    pub l_den: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainLog {
    pub entries: Vec<LogEntry>,
}

impl PretrainLog {
    /// Tab-separated, one line per step, shortest round-trip floats.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tlr\tl_con\tl_den\ttotal\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.step, e.lr, e.l_con, e.l_den, e.total
            ));
        }
        s
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the random stream for one record in one epoch, so corruption
/// does not depend on batch layout or processing order.
pub fn record_seed(seed: u64, id: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(seed ^ h) ^ epoch as u64)
}

/// Shuffled record order, one permutation per epoch.
pub(super) struct Stream {
    n: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    pub(super) fn new(n: usize, seed: u64) -> Self {
        let mut s = Stream {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ 0x5eed) ^ self.epoch as u64);
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    /// Next record index and the epoch it belongs to.
    pub(super) fn next(&mut self) -> (usize, usize) {
        if self.pos == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        self.pos += 1;
        (self.order[self.pos - 1], self.epoch)
    }
}

struct SampleGraph<'p> {
    tape: Tape,
    binder: Binder<'p>,
    pooled: Var,
    cls: Var,
    den: Var,
    masked: usize,
}

/// Encoder trunks and the denoising loss of one pair, on its own tape.
fn forward_sample<'p>(
    params: &'p ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    pair: &GeomTextPair,
    ids: &[usize],
    epoch: usize,
) -> Result<SampleGraph<'p>> {
    let tape = Tape::new();
    let binder = Binder::new(params);
    let types = atom_type_ids(&pair.molecule, &model.geom)?;
    let (_, pooled) = atom_features(&tape, &binder, &model.geom, &types, pair.molecule.coords())?;
    let (_, cls) = token_features(&tape, &binder, &model.text, ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(cfg.seed, pair.id(), epoch));
    let c = corrupt(&pair.molecule, &cfg.denoise, &mut rng);
    let pred = predict_masked(&tape, &binder, &model.geom, &model.denoise_head, &c)?;
    let den = denoising_loss_sum(&tape, &c, pred.coords, pred.type_logits, &cfg.denoise)?;
    Ok(SampleGraph {
        tape,
        binder,
        pooled,
        cls,
        den,
        masked: c.mask.len(),
    })
}

fn slice(g: &[f64], i: usize, d: usize) -> Vec<f64> {
    g[i * d..(i + 1) * d].to_vec()
}

/// Computes the window loss and its gradient.
///
/// The contrastive term is taken over the whole window of
/// `accum_steps × batch_size` pairs and the denoising term is the mean over
/// all masked atoms of the window. Each pair keeps its own tape for the
/// encoder trunks; the projections and the contrastive loss run once on the
/// stacked window, and their gradient reaches each pair through its pooled
/// rows. The micro-batch layout therefore never changes the result.
fn window_step(
    params: &ModelParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[(&GeomTextPair, &[usize], usize)],
) -> Result<(f64, f64, GradMap)> {
    let mut graphs = Vec::with_capacity(samples.len());
    for &(pair, ids, epoch) in samples {
        graphs.push(forward_sample(params, model, cfg, pair, ids, epoch)?);
    }
    let central = Tape::new();
    let binder = Binder::new(params);
    let pooled: Vec<Vec<f64>> = graphs
        .iter()
        .map(|s| s.tape.data(s.pooled).to_vec())
        .collect();
    let cls: Vec<Vec<f64>> = graphs.iter().map(|s| s.tape.data(s.cls).to_vec()).collect();
    let zg = central.leaf(&Tensor::from_rows(&pooled)?, true);
    let zt = central.leaf(&Tensor::from_rows(&cls)?, true);
    let g = project_geometry(&central, &binder, zg)?;
    let t = project_text(&central, &binder, zt)?;
    let l_con = contrastive_loss(&central, g, t, cfg.temperature)?;
    let l_con_value = central.item(l_con);
    let mut cg = central.backward(l_con)?;
    let mut grads = binder.take_gradients(&mut cg);
    let dg = cg.get(zg).map(<[f64]>::to_vec).unwrap_or_default();
    let dt = cg.get(zt).map(<[f64]>::to_vec).unwrap_or_default();

    let masked: usize = graphs.iter().map(|s| s.masked).sum();
    let den_sum: f64 = graphs.iter().map(|s| s.tape.item(s.den)).sum();
    let l_den = den_sum / masked as f64;

    let (dgeom, dtext) = (model.geom.atom_embed_dim, model.text.token_embed_dim);
    for (i, s) in graphs.iter().enumerate() {
        let mut seeds = vec![
            (s.pooled, slice(&dg, i, dgeom)),
            (s.cls, slice(&dt, i, dtext)),
        ];
        if cfg.alpha > 0.0 {
            seeds.push((s.den, vec![cfg.alpha / masked as f64]));
        }
        let mut gr = s.tape.backward_seeded(&seeds)?;
        add_grads(&mut grads, s.binder.take_gradients(&mut gr));
    }
    Ok((l_con_value, l_den, grads))
}

/// Pretrains encoders and denoise decoder on `L_con + α·L_den`.
///
/// Each optimizer step draws the next `accum_steps × batch_size` pairs from
/// a per-epoch shuffle seeded by `cfg.seed`; masking and noise use one
/// random stream per (record, epoch). Identical inputs give bit-identical
/// logs and parameters.
pub fn pretrain(
    pairs: &[GeomTextPair],
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &mut ModelParams,
) -> Result<PretrainLog> {
    cfg.validate()?;
    model.validate()?;
    if pairs.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    if cfg.window() > pairs.len() {
        return Err(Error::contract(format!(
            "a step needs {} distinct pairs but the corpus has {}",
            cfg.window(),
            pairs.len()
        )));
    }
    let ids: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| tokenize(&p.text, vocab, model.text.max_seq_len))
        .collect();

    let mut stream = Stream::new(pairs.len(), cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut log = PretrainLog::default();
    for step in 1..=cfg.total_steps {
        let picks: Vec<(usize, usize)> = (0..cfg.window()).map(|_| stream.next()).collect();
        let samples: Vec<(&GeomTextPair, &[usize], usize)> = picks
            .iter()
            .map(|&(i, e)| (&pairs[i], ids[i].as_slice(), e))
            .collect();
        let (l_con, l_den, grads) = window_step(params, model, cfg, &samples)?;
        let total = if cfg.alpha > 0.0 {
            l_con + cfg.alpha * l_den
        } else {
            l_con
        };
        if !total.is_finite() {
            let tail: Vec<&str> = samples.iter().rev().take(8).map(|s| s.0.id()).collect();
            return Err(Error::NonFinite(format!(
                "step {step}: total loss {total}; last batch ids {tail:?}"
            )));
        }
        let lr = lr_at(step, cfg)?;
        adam_step(params, &grads, &mut adam, lr, cfg.weight_decay).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        log.entries.push(LogEntry {
            step,
            lr,
            l_con,
            l_den,
            total,
        });
        if step % 50 == 0 || step == 1 {
            info!("step {step}: lr {lr:.3e} L_con {l_con:.4} L_den {l_den:.4} total {total:.4}");
        }
    }
    Ok(log)
}
