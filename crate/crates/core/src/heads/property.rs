use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_geometry, GeomEncoderConfig};
use crate::error::{Error, Result};
use crate::molio::Molecule;
use crate::nn;
use crate::tensor::{Binder, ModelParams, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropertyHeadConfig {
    pub hidden: usize,
}

impl Default for PropertyHeadConfig {
    fn default() -> Self {
        PropertyHeadConfig { hidden: 64 }
    }
}

impl PropertyHeadConfig {
    pub fn init_params(
        &self,
        geom: &GeomEncoderConfig,
        params: &mut ModelParams,
        rng: &mut impl Rng,
    ) -> Result<()> {
        nn::init_mlp(params, "property", (geom.proj_dim, self.hidden, 1), rng)
    }
}

/// Target normalization fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// Mean and population standard deviation of `targets`.
    pub fn fit(targets: &[f64]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::contract("cannot fit normalization on no targets"));
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let std = (targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::contract(
                "targets have zero spread; std must be positive",
            ));
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Head output in normalized units, `[1, 1]`.
pub fn property_output(
    tape: &Tape,
    p: &Binder,
    geom: &GeomEncoderConfig,
    m: &Molecule,
) -> Result<Var> {
    let g = encode_geometry(tape, p, geom, m)?.embedding;
    nn::mlp(tape, p, g, "property")
}

/// L1 error in normalized units for one molecule.
pub fn property_loss(
    tape: &Tape,
    p: &Binder,
    geom: &GeomEncoderConfig,
    m: &Molecule,
    target: f64,
    stats: &NormStats,
) -> Result<Var> {
    let out = property_output(tape, p, geom, m)?;
    let y = tape.constant(&Tensor::matrix(1, 1, vec![stats.normalize(target)])?);
    Ok(tape.sum(tape.abs(tape.sub(out, y)?)))
}

/// Prediction in target units: `head(g)·std + mean`.
pub fn predict_property(
    params: &ModelParams,
    geom: &GeomEncoderConfig,
    stats: Option<&NormStats>,
    m: &Molecule,
) -> Result<f64> {
    let stats =
        stats.ok_or_else(|| Error::contract("property head has no fitted normalization stats"))?;
    let tape = Tape::new();
    let out = property_output(&tape, &Binder::new(params), geom, m)?;
    Ok(stats.denormalize(tape.item(out)))
}
