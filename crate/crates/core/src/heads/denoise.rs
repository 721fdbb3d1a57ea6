use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{atom_features, GeomEncoderConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::objectives::CorruptedMolecule;
use crate::tensor::{Binder, ModelParams, ParamKind, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseHeadConfig {
    /// Hidden width of the type-logit MLP.
    pub hidden: usize,
    /// Predict a learned step from each masked atom's noisy position instead
    /// of an absolute position.
    pub displacement: bool,
}

impl Default for DenoiseHeadConfig {
    fn default() -> Self {
        DenoiseHeadConfig {
            hidden: 256,
            displacement: false,
        }
    }
}

impl DenoiseHeadConfig {
    pub fn init_params(
        &self,
        geom: &GeomEncoderConfig,
        params: &mut ModelParams,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config(
                "denoise hidden width must be positive".into(),
            ));
        }
        let d = geom.atom_embed_dim;
        nn::init_mlp(
            params,
            "denoise.type",
            (d, self.hidden, geom.atom_vocab_size()),
            rng,
        )?;
        nn::init_linear(params, "denoise.coord.wq", "denoise.coord.bq", d, d, rng)?;
        nn::init_linear(params, "denoise.coord.wk", "denoise.coord.bk", d, d, rng)?;
        if self.displacement {
            params.insert(
                "denoise.coord.gate",
                Tensor::zeros(vec![1]),
                ParamKind::Bias,
            )?;
        }
        Ok(())
    }
}

/// Decoder outputs for the masked atoms, in mask order.
#[derive(Clone, Copy, Debug)]
pub struct MaskedPrediction {
    /// `[|mask|, 3]`, in the frame of the noisy input.
    pub coords: Var,
    /// `[|mask|, V_atom]`.
    pub type_logits: Var,
    /// Encoder representations of the corrupted molecule `[N, d]`.
    pub atoms: Var,
}

/// Encodes the corrupted molecule and decodes every masked atom.
///
/// Types come from an MLP over the atom's final representation. Positions
/// are an attention-weighted average of the noisy input coordinates, with
/// weights computed from invariant features only, so predictions move
/// with the input frame.
pub fn predict_masked(
    tape: &Tape,
    p: &Binder,
    geom: &GeomEncoderConfig,
    head: &DenoiseHeadConfig,
    c: &CorruptedMolecule,
) -> Result<MaskedPrediction> {
    if c.mask.is_empty() {
        return Err(Error::contract("corrupted molecule has no masked atoms"));
    }
    let (atoms, _) = atom_features(tape, p, geom, &c.input_atoms, &c.noisy_coords)?;
    let zm = tape.gather_rows(atoms, &c.mask)?;
    let type_logits = nn::mlp(tape, p, zm, "denoise.type")?;

    let q = nn::linear(tape, p, zm, "denoise.coord.wq", "denoise.coord.bq")?;
    let k = nn::linear(tape, p, atoms, "denoise.coord.wk", "denoise.coord.bk")?;
    let s = tape.scale(
        tape.matmul(q, tape.transpose(k)?)?,
        1.0 / (geom.atom_embed_dim as f64).sqrt(),
    );
    let n = c.noisy_coords.len();
    let noisy = tape.constant(&Tensor::matrix(n, 3, c.noisy_coords.concat())?);
    let mut coords = tape.matmul(tape.softmax(s), noisy)?;
    if head.displacement {
        let m = c.mask.len();
        let own = tape.gather_rows(noisy, &c.mask)?;
        let step = tape.reshape(tape.sub(coords, own)?, vec![3 * m, 1])?;
        let step = tape.mul(step, p.get(tape, "denoise.coord.gate")?)?;
        coords = tape.add(own, tape.reshape(step, vec![m, 3])?)?;
    }
    Ok(MaskedPrediction {
        coords,
        type_logits,
        atoms,
    })
}
