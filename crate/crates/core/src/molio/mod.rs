//! Molecules, XYZ files, geometry–text pair corpora and their statistics.

pub mod elements;
mod pairs;
mod synth;
mod xyz;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pairs::{
    corpus_stats, join_by_id, load_pairs, parse_pairs, split_holdout, to_jsonl, write_pairs,
    CorpusStats, JoinOptions, JoinReport, LoadedPairs, RecordError,
};
pub use synth::{generate_synthetic_corpus, SynthConfig, SUBSTITUENTS};
pub use xyz::{parse_xyz, write_xyz};

/// Atom types and Cartesian coordinates (Å) of one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub id: String,
    atoms: Vec<u8>,
    coords: Vec<[f64; 3]>,
}

impl Molecule {
    pub fn new(id: impl Into<String>, atoms: Vec<u8>, coords: Vec<[f64; 3]>) -> Result<Self> {
        let id = id.into();
        if atoms.is_empty() {
            return Err(Error::contract(format!("molecule {id:?} has no atoms")));
        }
        if atoms.len() != coords.len() {
            return Err(Error::contract(format!(
                "molecule {id:?}: {} atoms but {} coordinate rows",
                atoms.len(),
                coords.len()
            )));
        }
        if let Some(&z) = atoms
            .iter()
            .find(|&&z| z == 0 || z > elements::MAX_ATOMIC_NUMBER)
        {
            return Err(Error::contract(format!(
                "molecule {id:?}: invalid atomic number {z}"
            )));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coordinates of molecule {id:?}")));
        }
        Ok(Molecule { id, atoms, coords })
    }

    pub fn atoms(&self) -> &[u8] {
        &self.atoms
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Atoms other than hydrogen.
    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.iter().filter(|&&z| z > 1).count()
    }

    /// Applies `p ↦ R·p + t` to every atom.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Molecule {
        let coords = self
            .coords
            .iter()
            .map(|p| {
                let mut q = translation;
                for (i, qi) in q.iter_mut().enumerate() {
                    *qi += (0..3).map(|j| rotation[i][j] * p[j]).sum::<f64>();
                }
                q
            })
            .collect();
        Molecule {
            id: self.id.clone(),
            atoms: self.atoms.clone(),
            coords,
        }
    }

    /// Reorders atoms so that new atom `i` is old atom `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Molecule> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len()
            || order
                .iter()
                .any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::contract(
                "permutation must list every atom exactly once",
            ));
        }
        Ok(Molecule {
            id: self.id.clone(),
            atoms: order.iter().map(|&i| self.atoms[i]).collect(),
            coords: order.iter().map(|&i| self.coords[i]).collect(),
        })
    }

    pub fn with_coords(&self, coords: Vec<[f64; 3]>) -> Result<Molecule> {
        Molecule::new(self.id.clone(), self.atoms.clone(), coords)
    }

    /// Root-mean-square deviation over the shared atom prefix, without alignment.
    pub fn rmsd_prefix(&self, other: &Molecule) -> f64 {
        let n = self.len().min(other.len());
        let ss: f64 = self.coords[..n]
            .iter()
            .zip(&other.coords[..n])
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
            .sum();
        (ss / n as f64).sqrt()
    }
}

/// Where a pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSource {
    #[serde(rename = "pubchemqc-like")]
    PubchemqcLike,
    #[serde(rename = "geom-like")]
    GeomLike,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl std::str::FromStr for PairSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pubchemqc-like" => Ok(PairSource::PubchemqcLike),
            "geom-like" => Ok(PairSource::GeomLike),
            "synthetic" => Ok(PairSource::Synthetic),
            other => Err(Error::Config(format!("unknown pair source {other:?}"))),
        }
    }
}

/// One molecule joined with its text description.
#[derive(Clone, Debug, PartialEq)]
pub struct GeomTextPair {
    pub molecule: Molecule,
    pub text: String,
    pub source: PairSource,
}

impl GeomTextPair {
    pub fn new(molecule: Molecule, text: impl Into<String>, source: PairSource) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::contract(format!(
                "pair {:?} has an empty description",
                molecule.id
            )));
        }
        Ok(GeomTextPair {
            molecule,
            text,
            source,
        })
    }

    pub fn id(&self) -> &str {
        &self.molecule.id
    }
}
