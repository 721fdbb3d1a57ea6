use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeomTextPair, Molecule, PairSource};
use crate::error::{Error, Result};

/// On-disk form of a pair; fields are written in this order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    id: String,
    atoms: Vec<u8>,
    coords: Vec<f64>,
    text: String,
    source: PairSource,
}

impl PairRecord {
    fn from_pair(p: &GeomTextPair) -> Self {
        PairRecord {
            id: p.molecule.id.clone(),
            atoms: p.molecule.atoms().to_vec(),
            coords: p.molecule.coords().iter().flatten().copied().collect(),
            text: p.text.clone(),
            source: p.source,
        }
    }

    fn into_pair(self) -> std::result::Result<GeomTextPair, String> {
        if !self.coords.len().is_multiple_of(3) {
            return Err(format!(
                "coords length {} not divisible by 3",
                self.coords.len()
            ));
        }
        if self.coords.len() / 3 != self.atoms.len() {
            return Err(format!(
                "{} atoms but {} coordinate triples",
                self.atoms.len(),
                self.coords.len() / 3
            ));
        }
        let coords = self
            .coords
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let m = Molecule::new(self.id, self.atoms, coords).map_err(|e| e.to_string())?;
        GeomTextPair::new(m, self.text, self.source).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct LoadedPairs {
    pub pairs: Vec<GeomTextPair>,
    /// Records skipped in non-strict mode.
    pub errors: Vec<RecordError>,
}

/// Parses line-delimited pair records. In strict mode the first bad
/// record aborts; otherwise bad records are reported and skipped.
pub fn parse_pairs(text: &str, strict: bool) -> Result<LoadedPairs> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<PairRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(PairRecord::into_pair);
        match parsed {
            Ok(p) => pairs.push(p),
            Err(message) if strict => {
                return Err(Error::Parse {
                    line: line_no,
                    message,
                })
            }
            Err(message) => {
                warn!("skipping record on line {line_no}: {message}");
                errors.push(RecordError {
                    line: line_no,
                    message,
                });
            }
        }
    }
    Ok(LoadedPairs { pairs, errors })
}

pub fn load_pairs(path: impl AsRef<Path>, strict: bool) -> Result<LoadedPairs> {
    parse_pairs(&fs::read_to_string(path)?, strict)
}

/// Canonical serialization: one record per line, fields in fixed order,
/// shortest round-trip floats.
pub fn to_jsonl(pairs: &[GeomTextPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&PairRecord::from_pair(p))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pairs(pairs: &[GeomTextPair], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_jsonl(pairs)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct JoinOptions {
    /// How many geometries (conformers) to keep per id; later ones count as duplicates.
    pub max_per_id: usize,
    pub source: PairSource,
}

impl Default for JoinOptions {
    fn default() -> Self {
        JoinOptions {
            max_per_id: 1,
            source: PairSource::GeomLike,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct JoinReport {
    pub pairs: Vec<GeomTextPair>,
    pub unmatched_geometries: Vec<String>,
    pub unmatched_annotations: Vec<String>,
    pub duplicate_geometries: usize,
    pub duplicate_annotations: usize,
    pub warnings: Vec<String>,
}

/// Joins geometries with `(id, text)` annotations on the identifier.
///
/// Output follows geometry order. Duplicate annotation ids keep the first
/// text; geometries beyond `max_per_id` for an id are dropped and counted.
pub fn join_by_id(
    geometries: &[Molecule],
    annotations: &[(String, String)],
    opts: JoinOptions,
) -> JoinReport {
    let mut report = JoinReport::default();
    let mut texts: HashMap<&str, &str> = HashMap::new();
    let mut annotation_order = Vec::new();
    for (id, text) in annotations {
        if texts.contains_key(id.as_str()) {
            report.duplicate_annotations += 1;
            continue;
        }
        texts.insert(id, text);
        annotation_order.push(id.as_str());
    }

    let mut kept: HashMap<&str, usize> = HashMap::new();
    let mut geometry_ids = HashSet::new();
    for m in geometries {
        geometry_ids.insert(m.id.as_str());
        let n = kept.entry(m.id.as_str()).or_insert(0);
        if *n >= opts.max_per_id.max(1) {
            report.duplicate_geometries += 1;
            continue;
        }
        *n += 1;
        match texts.get(m.id.as_str()) {
            Some(text) => match GeomTextPair::new(m.clone(), *text, opts.source) {
                Ok(p) => report.pairs.push(p),
                Err(e) => report.warnings.push(format!("{}: {e}", m.id)),
            },
            None => {
                if *n == 1 {
                    report.unmatched_geometries.push(m.id.clone());
                }
            }
        }
    }
    report.unmatched_annotations = annotation_order
        .into_iter()
        .filter(|id| !geometry_ids.contains(id))
        .map(str::to_string)
        .collect();

    if report.duplicate_geometries > 0 {
        report.warnings.push(format!(
            "{} duplicate geometries dropped",
            report.duplicate_geometries
        ));
    }
    if report.duplicate_annotations > 0 {
        report.warnings.push(format!(
            "{} duplicate annotations dropped",
            report.duplicate_annotations
        ));
    }
    if report.pairs.is_empty() {
        report
            .warnings
            .push("join produced an empty corpus".to_string());
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    report
}

/// Corpus size, mean heavy-atom count and mean word count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub quantity: usize,
    pub avg_heavy_atoms: f64,
    pub avg_words: f64,
}

pub fn corpus_stats(pairs: &[GeomTextPair]) -> Result<CorpusStats> {
    if pairs.is_empty() {
        return Err(Error::contract("corpus statistics of an empty corpus"));
    }
    let n = pairs.len() as f64;
    let heavy: usize = pairs.iter().map(|p| p.molecule.heavy_atom_count()).sum();
    let words: usize = pairs
        .iter()
        .map(|p| p.text.split_whitespace().count())
        .sum();
    Ok(CorpusStats {
        quantity: pairs.len(),
        avg_heavy_atoms: heavy as f64 / n,
        avg_words: words as f64 / n,
    })
}

/// Deterministically moves `holdout` randomly chosen pairs into a second
/// list; both keep their original relative order.
pub fn split_holdout(
    pairs: &[GeomTextPair],
    holdout: usize,
    seed: u64,
) -> Result<(Vec<GeomTextPair>, Vec<GeomTextPair>)> {
    if holdout >= pairs.len() {
        return Err(Error::contract(format!(
            "cannot hold out {holdout} of {} pairs",
            pairs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: HashSet<usize> = idx[..holdout].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        if held.contains(&i) {
            test.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    Ok((train, test))
}
