//! Finite-difference verification of every training loss on a tiny random
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::vocab::{BOS, CLS, EOS, RESERVED};
use crate::encoders::{encode_geometry, encode_text, GeomEncoderConfig, TextEncoderConfig};
use crate::error::Result;
use crate::heads::{
    caption_teacher_forced_loss, predict_masked, property_loss, CaptionConfig, DenoiseHeadConfig,
    NormStats, PropertyHeadConfig,
};
use crate::molio::Molecule;
use crate::objectives::{
    contrastive_loss, corrupt, denoising_loss_sum, total_loss, CorruptedMolecule, DenoiseConfig,
};
use crate::tensor::{finite_diff_check, Binder, GradCheckReport, Tape, Var};
use crate::trainer::ModelConfig;

pub const LOSSES: [&str; 5] = [
    "contrastive",
    "denoising",
    "combined",
    "property",
    "caption",
];

const VOCAB: usize = 14;
const TAU: f64 = 0.1;
const ALPHA: f64 = 0.4;

/// A model small enough for exhaustive finite differences, with every head.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        geom: GeomEncoderConfig {
            atom_embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            rbf_centers: vec![0.0, 1.0, 2.0, 3.0],
            rbf_width: 0.7,
            proj_dim: 3,
            proj_hidden: 5,
            max_atoms: 8,
            max_atomic_number: 9,
        },
        text: TextEncoderConfig {
            vocab_size: VOCAB,
            token_embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 8,
            proj_dim: 3,
            proj_hidden: 5,
        },
        denoise_head: DenoiseHeadConfig {
            hidden: 6,
            displacement: false,
        },
        property: Some(PropertyHeadConfig { hidden: 5 }),
        property_stats: None,
        caption: Some(CaptionConfig {
            prefix_len: 2,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 8,
            vocab_size: VOCAB,
            freeze_encoder: false,
        }),
    }
}

#[derive(Clone, Debug)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

struct Fixture {
    molecules: Vec<Molecule>,
    texts: Vec<Vec<usize>>,
    captions: Vec<Vec<usize>>,
    corrupted: Vec<CorruptedMolecule>,
    targets: Vec<f64>,
    stats: NormStats,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut molecules = Vec::new();
    let mut texts = Vec::new();
    let mut captions = Vec::new();
    for i in 0..3 {
        let n = rng.gen_range(3..=5);
        let atoms = (0..n).map(|_| rng.gen_range(1..=9)).collect();
        let coords = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.5..1.5),
                ]
            })
            .collect();
        molecules.push(Molecule::new(format!("m{i}"), atoms, coords)?);
        let words = |rng: &mut ChaCha8Rng, k: usize| -> Vec<usize> {
            (0..k)
                .map(|_| rng.gen_range(RESERVED.len()..VOCAB))
                .collect()
        };
        let len = rng.gen_range(2..=5);
        texts.push([vec![CLS], words(&mut rng, len)].concat());
        let len = rng.gen_range(1..=4);
        captions.push([vec![BOS], words(&mut rng, len), vec![EOS]].concat());
    }
    let denoise = DenoiseConfig {
        mask_ratio: 0.4,
        ..DenoiseConfig::default()
    };
    let corrupted = molecules
        .iter()
        .map(|m| corrupt(m, &denoise, &mut rng))
        .collect();
    let targets: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let stats = NormStats::fit(&targets)?;
    Ok(Fixture {
        molecules,
        texts,
        captions,
        corrupted,
        targets,
        stats,
    })
}

fn contrastive(tape: &Tape, b: &Binder, model: &ModelConfig, f: &Fixture) -> Result<Var> {
    let mut g = Vec::new();
    let mut t = Vec::new();
    for (m, ids) in f.molecules.iter().zip(&f.texts) {
        g.push(encode_geometry(tape, b, &model.geom, m)?.embedding);
        t.push(encode_text(tape, b, &model.text, ids)?.embedding);
    }
    let g = tape.concat_rows(&g)?;
    let t = tape.concat_rows(&t)?;
    contrastive_loss(tape, g, t, TAU)
}

fn denoising(tape: &Tape, b: &Binder, model: &ModelConfig, f: &Fixture) -> Result<Var> {
    let cfg = DenoiseConfig::default();
    let mut sums = Vec::new();
    let mut masked = 0;
    for c in &f.corrupted {
        let pred = predict_masked(tape, b, &model.geom, &model.denoise_head, c)?;
        sums.push(denoising_loss_sum(
            tape,
            c,
            pred.coords,
            pred.type_logits,
            &cfg,
        )?);
        masked += c.mask.len();
    }
    Ok(tape.scale(sum(tape, &sums)?, 1.0 / masked as f64))
}

fn sum(tape: &Tape, parts: &[Var]) -> Result<Var> {
    parts[1..]
        .iter()
        .try_fold(parts[0], |acc, &v| tape.add(acc, v))
}

fn mean(tape: &Tape, parts: Vec<Var>) -> Result<Var> {
    Ok(tape.scale(sum(tape, &parts)?, 1.0 / parts.len() as f64))
}

fn evaluate(loss: &str, tape: &Tape, b: &Binder, model: &ModelConfig, f: &Fixture) -> Result<Var> {
    match loss {
        "contrastive" => contrastive(tape, b, model, f),
        "denoising" => denoising(tape, b, model, f),
        "combined" => {
            let l_con = contrastive(tape, b, model, f)?;
            let l_den = denoising(tape, b, model, f)?;
            total_loss(tape, l_con, l_den, ALPHA)
        }
        "property" => {
            let parts = f
                .molecules
                .iter()
                .zip(&f.targets)
                .map(|(m, &y)| property_loss(tape, b, &model.geom, m, y, &f.stats))
                .collect::<Result<Vec<_>>>()?;
            mean(tape, parts)
        }
        "caption" => {
            let cap = model
                .caption
                .as_ref()
                .expect("tiny model has a caption decoder");
            let parts = f
                .molecules
                .iter()
                .zip(&f.captions)
                .map(|(m, seq)| caption_teacher_forced_loss(tape, b, &model.geom, cap, m, seq))
                .collect::<Result<Vec<_>>>()?;
            mean(tape, parts)
        }
        other => unreachable!("unknown loss {other}"),
    }
}

/// Central finite differences against the tape gradient for every loss,
/// over every parameter entry of a tiny model seeded by `seed`.
pub fn check_losses(seed: u64, step: f64, tol: f64) -> Result<Vec<LossCheck>> {
    let model = tiny_model_config();
    let params = model.init_params(seed)?;
    let f = fixture(seed ^ 0x5151)?;
    LOSSES
        .iter()
        .map(|&loss| {
            let report = finite_diff_check(&params, step, tol, |tape, b| {
                evaluate(loss, tape, b, &model, &f)
            })?;
            Ok(LossCheck { loss, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_at_default_tolerance() {
        for c in check_losses(1, 1e-5, 1e-4).unwrap() {
            assert!(c.report.passed, "{}: {}", c.loss, c.report.max_rel_error);
        }
    }
}
