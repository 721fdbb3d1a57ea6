use log::info;
use serde::Serialize;

use super::pretrain::Stream;
use super::{adam_step, lr_at, AdamState, ModelConfig, TrainConfig};
use crate::encoders::{tokenize, Vocab};
use crate::error::{Error, Result};
use crate::heads::{
    caption_sequence, caption_teacher_forced_loss, property_loss, NormStats, GEOM_PREFIX,
};
use crate::molio::{GeomTextPair, Molecule};
use crate::tensor::{add_grads, Binder, GradMap, ModelParams, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneLog {
    pub entries: Vec<FinetuneStep>,
}

impl FinetuneLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tlr\tloss\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.step, e.lr, e.loss));
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

/// Minimizes the mean of `loss` over windows of records drawn from a
/// seeded shuffle, one tape per record.
fn optimize<F>(
    n: usize,
    cfg: &TrainConfig,
    params: &mut ModelParams,
    frozen: &[&str],
    loss: F,
) -> Result<FinetuneLog>
where
    F: Fn(&Tape, &Binder, usize) -> Result<Var>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::contract("fine-tuning set is empty"));
    }
    let window = cfg.window().min(n);
    let mut stream = Stream::new(n, cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut log = FinetuneLog::default();
    for step in 1..=cfg.total_steps {
        let mut grads = GradMap::new();
        let mut total = 0.0;
        for _ in 0..window {
            let (i, _) = stream.next();
            let tape = Tape::new();
            let binder = Binder::with_frozen(params, frozen);
            let l = loss(&tape, &binder, i)?;
            total += tape.item(l);
            let mut g = tape.backward_seeded(&[(l, vec![1.0 / window as f64])])?;
            add_grads(&mut grads, binder.take_gradients(&mut g));
        }
        let mean = total / window as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: loss {mean}")));
        }
        let lr = lr_at(step, cfg)?;
        adam_step(params, &grads, &mut adam, lr, cfg.weight_decay)?;
        log.entries.push(FinetuneStep {
            step,
            lr,
            loss: mean,
        });
        if step % 100 == 0 || step == 1 {
            info!("step {step}: lr {lr:.3e} loss {mean:.5}");
        }
    }
    Ok(log)
}

/// Fine-tunes the property head, and the geometric encoder unless
/// `freeze_encoder`, on the L1 error of normalized targets.
pub fn fit_property(
    molecules: &[Molecule],
    targets: &[f64],
    stats: &NormStats,
    model: &ModelConfig,
    cfg: &TrainConfig,
    freeze_encoder: bool,
    params: &mut ModelParams,
) -> Result<FinetuneLog> {
    if molecules.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} molecules but {} targets",
            molecules.len(),
            targets.len()
        )));
    }
    if model.property.is_none() {
        return Err(Error::Config("model has no property head".into()));
    }
    let frozen: &[&str] = if freeze_encoder { &[GEOM_PREFIX] } else { &[] };
    optimize(molecules.len(), cfg, params, frozen, |tape, b, i| {
        property_loss(tape, b, &model.geom, &molecules[i], targets[i], stats)
    })
}

/// Trains the caption decoder by teacher forcing on `[BOS] text [EOS]`.
pub fn caption_train(
    pairs: &[GeomTextPair],
    vocab: &Vocab,
    model: &ModelConfig,
    cfg: &TrainConfig,
    params: &mut ModelParams,
) -> Result<FinetuneLog> {
    let cap = model
        .caption
        .as_ref()
        .ok_or_else(|| Error::Config("model has no caption decoder".into()))?;
    let seqs: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| caption_sequence(&tokenize(&p.text, vocab, cap.max_seq_len), cap))
        .collect();
    let frozen: &[&str] = if cap.freeze_encoder {
        &[GEOM_PREFIX]
    } else {
        &[]
    };
    optimize(pairs.len(), cfg, params, frozen, |tape, b, i| {
        caption_teacher_forced_loss(tape, b, &model.geom, cap, &pairs[i].molecule, &seqs[i])
    })
}
