//! Pretraining objectives: symmetric InfoNCE alignment between geometry and
//! text embeddings, molecule corruption, the masked-atom denoising loss and
//! their weighted combination.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::MASK_ATOM_TYPE;
use crate::error::{Error, Result};
use crate::molio::Molecule;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.1 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

/// `[B, B]` logits with entry `(i, j) = cos(g_i, t_j) / τ`.
pub fn similarity_matrix(tape: &Tape, g: Var, t: Var, tau: f64) -> Result<Var> {
    let (sg, st) = (tape.shape(g), tape.shape(t));
    if sg.len() != 2 || sg != st {
        return Err(Error::shape(
            "similarity_matrix",
            format!("embedding batches {sg:?} and {st:?} differ"),
        ));
    }
    let gn = tape.normalize_rows(g)?;
    let tn = tape.normalize_rows(t)?;
    Ok(tape.scale(tape.matmul(gn, tape.transpose(tn)?)?, 1.0 / tau))
}

/// Symmetric InfoNCE: `−(1/B) Σ_i [log softmax_row(S)_ii + log softmax_col(S)_ii]`.
pub fn contrastive_loss(tape: &Tape, g: Var, t: Var, tau: f64) -> Result<Var> {
    let s = similarity_matrix(tape, g, t, tau)?;
    let b = tape.shape(s)[0];
    let diag: Vec<usize> = (0..b).collect();
    let g2t = tape.nll_sum(tape.log_softmax(s), &diag)?;
    let t2g = tape.nll_sum(tape.log_softmax(tape.transpose(s)?), &diag)?;
    Ok(tape.scale(tape.add(g2t, t2g)?, 1.0 / b as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    /// Å.
    pub sigma: f64,
    pub mask_ratio: f64,
    /// λ, weight of the atom-type cross-entropy.
    pub type_loss_weight: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            sigma: 1.0,
            mask_ratio: 0.15,
            type_loss_weight: 1.0,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be ≥ 0, got {}",
                self.sigma
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.type_loss_weight >= 0.0) {
            return Err(Error::Config("type_loss_weight must be ≥ 0".into()));
        }
        Ok(())
    }

    /// `max(1, ⌈ratio·N⌉)`, with a small tolerance so that products which
    /// are whole numbers in exact arithmetic do not round up.
    pub fn mask_count(&self, n: usize) -> usize {
        let k = (self.mask_ratio * n as f64 - 1e-9).ceil().max(1.0) as usize;
        k.min(n)
    }
}

/// A molecule with masked atom types and noised coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedMolecule {
    /// Atom-type ids; masked atoms carry [`MASK_ATOM_TYPE`].
    pub input_atoms: Vec<usize>,
    pub noisy_coords: Vec<[f64; 3]>,
    /// Masked atom indices, ascending.
    pub mask: Vec<usize>,
    pub target_coords: Vec<[f64; 3]>,
    pub target_types: Vec<u8>,
}

/// Masks `max(1, ⌈ratio·N⌉)` atoms chosen uniformly without replacement
/// and adds i.i.d. `N(0, σ²)` noise to every coordinate of every atom.
pub fn corrupt(m: &Molecule, cfg: &DenoiseConfig, rng: &mut impl Rng) -> CorruptedMolecule {
    let n = m.len();
    let mut mask = index::sample(rng, n, cfg.mask_count(n)).into_vec();
    mask.sort_unstable();
    let noisy_coords = m
        .coords()
        .iter()
        .map(|p| {
            let mut q = *p;
            for v in &mut q {
                *v += cfg.sigma * rng.sample::<f64, _>(StandardNormal);
            }
            q
        })
        .collect();
    let mut input_atoms: Vec<usize> = m.atoms().iter().map(|&z| z as usize).collect();
    for &i in &mask {
        input_atoms[i] = MASK_ATOM_TYPE;
    }
    CorruptedMolecule {
        input_atoms,
        noisy_coords,
        target_coords: mask.iter().map(|&i| m.coords()[i]).collect(),
        target_types: mask.iter().map(|&i| m.atoms()[i]).collect(),
        mask,
    }
}

/// `Σ_masked (‖p̂ − p‖² + λ·CE(logits, type))`, the unnormalized denoising
/// loss; divide by the number of masked atoms for the mean.
pub fn denoising_loss_sum(
    tape: &Tape,
    c: &CorruptedMolecule,
    pred_coords: Var,
    type_logits: Var,
    cfg: &DenoiseConfig,
) -> Result<Var> {
    let k = c.mask.len();
    let sc = tape.shape(pred_coords);
    let sl = tape.shape(type_logits);
    if sc != [k, 3] || sl.len() != 2 || sl[0] != k {
        return Err(Error::contract(format!(
            "predictions {sc:?} / {sl:?} do not match {k} masked atoms"
        )));
    }
    let types: Vec<usize> = c.target_types.iter().map(|&z| z as usize).collect();
    if let Some(&z) = types.iter().find(|&&z| z >= sl[1]) {
        return Err(Error::contract(format!(
            "target type {z} has no logit among {}",
            sl[1]
        )));
    }
    let target = tape.constant(&Tensor::matrix(k, 3, c.target_coords.concat())?);
    let coord = tape.sq_l2(tape.sub(pred_coords, target)?);
    if cfg.type_loss_weight == 0.0 {
        return Ok(coord);
    }
    let ce = tape.nll_sum(tape.log_softmax(type_logits), &types)?;
    tape.add(coord, tape.scale(ce, cfg.type_loss_weight))
}

/// Mean over masked atoms of `‖p̂ − p‖² + λ·CE`.
pub fn denoising_loss(
    tape: &Tape,
    c: &CorruptedMolecule,
    pred_coords: Var,
    type_logits: Var,
    cfg: &DenoiseConfig,
) -> Result<Var> {
    let s = denoising_loss_sum(tape, c, pred_coords, type_logits, cfg)?;
    Ok(tape.scale(s, 1.0 / c.mask.len() as f64))
}

/// `L_con + α·L_den`. With `α = 0` the denoising term is left off the graph,
/// so nothing upstream of it receives a gradient.
pub fn total_loss(tape: &Tape, l_con: Var, l_den: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("α must be ≥ 0, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(l_con);
    }
    tape.add(l_con, tape.scale(l_den, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(t: &Tape, r: &[Vec<f64>]) -> Var {
        t.constant(&Tensor::from_rows(r).unwrap())
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let t = Tape::new();
        let e = rows(&t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = t.value(similarity_matrix(&t, e, e, 0.1).unwrap());
        assert_eq!(s.data(), &[10.0, 0.0, 0.0, 10.0]);
        let l = t.item(contrastive_loss(&t, e, e, 0.1).unwrap());
        assert!((l - 2.0 * (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 9.0796e-5).abs() < 1e-8);
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let t = Tape::new();
        let g = rows(&t, &[vec![0.3, -2.0, 1.0]]);
        let x = rows(&t, &[vec![-1.0, 0.5, 4.0]]);
        assert_eq!(t.item(contrastive_loss(&t, g, x, 0.1).unwrap()), 0.0);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let t = Tape::new();
        let g = rows(&t, &[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(
            similarity_matrix(&t, g, g, 0.1),
            Err(Error::DegenerateEmbedding { row: 1 })
        ));
    }

    #[test]
    fn mask_counts() {
        let cfg = DenoiseConfig::default();
        assert_eq!(cfg.mask_count(10), 2);
        assert_eq!(cfg.mask_count(1), 1);
        assert_eq!(cfg.mask_count(20), 3);
    }

    #[test]
    fn zero_sigma_keeps_coordinates() {
        let m = Molecule::new(
            "m",
            vec![6, 8, 1],
            vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.0], [0.0, 1.5, 0.0]],
        )
        .unwrap();
        let cfg = DenoiseConfig {
            sigma: 0.0,
            ..DenoiseConfig::default()
        };
        let c = corrupt(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.noisy_coords, m.coords());
        assert_eq!(c.mask.len(), 1);
        assert_eq!(c.input_atoms[c.mask[0]], MASK_ATOM_TYPE);
    }

    #[test]
    fn unit_coordinate_error() {
        let c = CorruptedMolecule {
            input_atoms: vec![0],
            noisy_coords: vec![[0.0; 3]],
            mask: vec![0],
            target_coords: vec![[1.0, 0.0, 0.0]],
            target_types: vec![6],
        };
        let cfg = DenoiseConfig {
            type_loss_weight: 0.0,
            ..DenoiseConfig::default()
        };
        let t = Tape::new();
        let p = rows(&t, &[vec![0.0; 3]]);
        let l = rows(&t, &[vec![0.0; 10]]);
        assert_eq!(t.item(denoising_loss(&t, &c, p, l, &cfg).unwrap()), 1.0);
        let short = rows(&t, &[vec![0.0; 3], vec![0.0; 3]]);
        assert!(denoising_loss(&t, &c, short, l, &cfg).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = Tape::new();
        let a = t.constant(&Tensor::scalar(0.5));
        let b = t.constant(&Tensor::scalar(0.25));
        assert_eq!(t.item(total_loss(&t, a, b, 1.0).unwrap()), 0.75);
        assert_eq!(t.item(total_loss(&t, a, b, 0.0).unwrap()), 0.5);
        assert!(total_loss(&t, a, b, -1.0).is_err());
    }
}
