use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molio::Molecule;
use crate::nn::{self, ScoreBias};
use crate::tensor::{Binder, ModelParams, ParamKind, Tape, Tensor, Var};

/// Atom-type id reserved for masked atoms; real atoms use their atomic number.
pub const MASK_ATOM_TYPE: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeomEncoderConfig {
    pub atom_embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Distance centers in Å, strictly increasing.
    pub rbf_centers: Vec<f64>,
    /// Å.
    pub rbf_width: f64,
    pub proj_dim: usize,
    /// Hidden width of the projection MLP.
    pub proj_hidden: usize,
    pub max_atoms: usize,
    /// Largest atomic number with an embedding row.
    pub max_atomic_number: u8,
}

impl Default for GeomEncoderConfig {
    fn default() -> Self {
        GeomEncoderConfig {
            atom_embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            rbf_centers: (0..16).map(|k| 10.0 * k as f64 / 15.0).collect(),
            rbf_width: 0.5,
            proj_dim: 512,
            proj_hidden: 512,
            max_atoms: 64,
            max_atomic_number: 54,
        }
    }
}

impl GeomEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("geometry encoder: {m}")));
        if self.atom_embed_dim == 0
            || self.num_heads == 0
            || !self.atom_embed_dim.is_multiple_of(self.num_heads)
        {
            return bad("atom_embed_dim must be a positive multiple of num_heads");
        }
        if self.rbf_centers.is_empty() || self.rbf_centers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("rbf_centers must be non-empty and strictly increasing");
        }
        if !(self.rbf_width > 0.0) {
            return bad("rbf_width must be positive");
        }
        if self.proj_dim == 0
            || self.proj_hidden == 0
            || self.max_atoms == 0
            || self.max_atomic_number == 0
        {
            return bad("proj_dim, proj_hidden, max_atoms and max_atomic_number must be positive");
        }
        Ok(())
    }

    /// Rows of the atom-type embedding: the mask type plus every atomic number.
    pub fn atom_vocab_size(&self) -> usize {
        self.max_atomic_number as usize + 1
    }

    pub fn init_params(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let d = self.atom_embed_dim;
        params.init(
            "geom.atom_embed",
            vec![self.atom_vocab_size(), d],
            ParamKind::Embedding,
            rng,
        )?;
        for l in 0..self.num_layers {
            let p = format!("geom.layer{l}");
            nn::init_block(params, &p, d, rng)?;
            params.init(
                format!("{p}.attn.rbf_w"),
                vec![self.rbf_centers.len(), self.num_heads],
                ParamKind::Weight,
                rng,
            )?;
        }
        nn::init_layer_norm(params, "geom.ln_f", d, rng)?;
        nn::init_mlp(
            params,
            "geom.proj",
            (d, self.proj_hidden, self.proj_dim),
            rng,
        )
    }
}

/// Gaussian radial basis expansion: component k is `exp(−(d − c_k)² / 2w²)`.
pub fn rbf_expand(distance: f64, cfg: &GeomEncoderConfig) -> Vec<f64> {
    let w2 = 2.0 * cfg.rbf_width * cfg.rbf_width;
    cfg.rbf_centers
        .iter()
        .map(|c| (-(distance - c).powi(2) / w2).exp())
        .collect()
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// RBF features of every ordered atom pair as an `[N², K]` matrix.
fn pair_features(coords: &[[f64; 3]], cfg: &GeomEncoderConfig) -> Tensor {
    let n = coords.len();
    let k = cfg.rbf_centers.len();
    let mut data = Vec::with_capacity(n * n * k);
    for a in coords {
        for b in coords {
            data.extend(rbf_expand(distance(a, b), cfg));
        }
    }
    Tensor::matrix(n * n, k, data).expect("pair feature shape")
}

/// Per-atom and pooled outputs of the geometric encoder.
#[derive(Clone, Copy, Debug)]
pub struct GeomEncoding {
    /// Final per-atom representations `[N, d]`.
    pub atoms: Var,
    /// Mean over atoms `[1, d]`.
    pub pooled: Var,
    /// Projected embedding `[1, proj_dim]`.
    pub embedding: Var,
}

/// Maps atomic numbers to atom-type ids, rejecting types without an embedding.
pub fn atom_type_ids(m: &Molecule, cfg: &GeomEncoderConfig) -> Result<Vec<usize>> {
    m.atoms()
        .iter()
        .map(|&z| {
            if z == 0 || z > cfg.max_atomic_number {
                Err(Error::Vocabulary(format!(
                    "atomic number {z} in {:?} outside the atom-type vocabulary 1..={}",
                    m.id, cfg.max_atomic_number
                )))
            } else {
                Ok(z as usize)
            }
        })
        .collect()
}

/// Final per-atom representations `[N, d]` and their mean `[1, d]`, before
/// the projection. Atoms are given as type ids (`MASK_ATOM_TYPE` for masked
/// atoms); coordinates enter only through pairwise distances.
pub fn atom_features(
    tape: &Tape,
    p: &Binder,
    cfg: &GeomEncoderConfig,
    types: &[usize],
    coords: &[[f64; 3]],
) -> Result<(Var, Var)> {
    let n = types.len();
    if n == 0 || n != coords.len() {
        return Err(Error::contract(format!(
            "{} atom types but {} coordinate rows",
            n,
            coords.len()
        )));
    }
    if n > cfg.max_atoms {
        return Err(Error::Capacity(format!(
            "{n} atoms exceed max_atoms {}",
            cfg.max_atoms
        )));
    }
    if let Some(&t) = types.iter().find(|&&t| t >= cfg.atom_vocab_size()) {
        return Err(Error::Vocabulary(format!(
            "atom type {t} outside 0..{}",
            cfg.atom_vocab_size()
        )));
    }

    let mut x = tape.gather_rows(p.get(tape, "geom.atom_embed")?, types)?;
    let rbf = tape.constant(&pair_features(coords, cfg));
    for l in 0..cfg.num_layers {
        let prefix = format!("geom.layer{l}");
        let b = tape.matmul(rbf, p.get(tape, &format!("{prefix}.attn.rbf_w"))?)?;
        let per_head = (0..cfg.num_heads)
            .map(|h| tape.reshape(tape.slice_cols(b, h..h + 1)?, vec![n, n]))
            .collect::<Result<Vec<_>>>()?;
        x = nn::block(
            tape,
            p,
            x,
            &prefix,
            cfg.num_heads,
            &ScoreBias::PerHead(&per_head),
            None,
        )?;
    }
    let atoms = nn::layer_norm(tape, p, x, "geom.ln_f")?;
    let pooled = tape.mean_rows(atoms)?;
    Ok((atoms, pooled))
}

/// Projection MLP into the shared space, applied row-wise to `[B, d]`.
pub fn project_geometry(tape: &Tape, p: &Binder, pooled: Var) -> Result<Var> {
    nn::mlp(tape, p, pooled, "geom.proj")
}

pub fn encode_atoms(
    tape: &Tape,
    p: &Binder,
    cfg: &GeomEncoderConfig,
    types: &[usize],
    coords: &[[f64; 3]],
) -> Result<GeomEncoding> {
    let (atoms, pooled) = atom_features(tape, p, cfg, types, coords)?;
    let embedding = project_geometry(tape, p, pooled)?;
    Ok(GeomEncoding {
        atoms,
        pooled,
        embedding,
    })
}

pub fn encode_geometry(
    tape: &Tape,
    p: &Binder,
    cfg: &GeomEncoderConfig,
    m: &Molecule,
) -> Result<GeomEncoding> {
    encode_atoms(tape, p, cfg, &atom_type_ids(m, cfg)?, m.coords())
}

/// Embedding `g` of a molecule, evaluated outside any training tape.
pub fn embed_molecule(
    params: &ModelParams,
    cfg: &GeomEncoderConfig,
    m: &Molecule,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let binder = Binder::new(params);
    let enc = encode_geometry(&tape, &binder, cfg, m)?;
    Ok(tape.data(enc.embedding).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rbf_peak_and_width() {
        let cfg = GeomEncoderConfig::default();
        let c = cfg.rbf_centers[3];
        assert_eq!(rbf_expand(c, &cfg)[3], 1.0);
        let v = rbf_expand(c + cfg.rbf_width, &cfg)[3];
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn rbf_components_bounded_and_decay_past_last_center() {
        let cfg = GeomEncoderConfig::default();
        let last = *cfg.rbf_centers.last().unwrap();
        let mut prev = rbf_expand(last, &cfg);
        for i in 0..=1500 {
            let d = i as f64 * 0.01;
            let v = rbf_expand(d, &cfg);
            assert!(v.iter().all(|&x| x > 0.0 && x <= 1.0), "d = {d}");
            if d > last {
                assert!(v.iter().zip(&prev).all(|(a, b)| a < b));
                prev = v;
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeomEncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = GeomEncoderConfig {
            rbf_centers: vec![0.0, 2.0, 1.0],
            ..GeomEncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn capacity_and_vocabulary_errors() {
        let cfg = GeomEncoderConfig {
            atom_embed_dim: 8,
            num_heads: 2,
            proj_dim: 4,
            max_atoms: 2,
            ..GeomEncoderConfig::default()
        };
        let mut params = ModelParams::new();
        cfg.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let big = Molecule::new("big", vec![6; 3], vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(
            embed_molecule(&params, &cfg, &big),
            Err(Error::Capacity(_))
        ));
        let xe = Molecule::new("u", vec![92], vec![[0.0; 3]]).unwrap();
        assert!(matches!(
            embed_molecule(&params, &cfg, &xe),
            Err(Error::Vocabulary(_))
        ));
    }
}
