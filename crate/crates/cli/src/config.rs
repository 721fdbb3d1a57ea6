//! Run configuration: a TOML document with `[paths]`, `[model.*]` and
//! `[train]` sections. Flags are merged into the document before it is
//! checked, so overrides and file values go through the same validation.

use std::fs;
use std::path::{Path, PathBuf};

use geomtext::trainer::{ModelConfig, TrainConfig};
use geomtext::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::cli::TrainArgs;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub pairs: Option<PathBuf>,
    pub val_pairs: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn section<'a>(doc: &'a mut Table, name: &str) -> Result<&'a mut Table> {
    doc.entry(name)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("[{name}] must be a table")))
}

fn set(doc: &mut Table, name: &str, key: &str, value: Option<Value>) -> Result<()> {
    if let Some(v) = value {
        section(doc, name)?.insert(key.to_string(), v);
    }
    Ok(())
}

fn int(v: Option<u64>) -> Result<Option<Value>> {
    v.map(|x| {
        i64::try_from(x)
            .map(Value::Integer)
            .map_err(|_| Error::Config(format!("{x} is too large")))
    })
    .transpose()
}

fn path(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

impl RunConfig {
    /// Reads `--config` if given, applies flag overrides and validates.
    pub fn load(args: &TrainArgs) -> Result<Self> {
        let mut doc = match &args.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Table::new(),
        };
        set(&mut doc, "paths", "pairs", path(&args.pairs))?;
        set(&mut doc, "paths", "val_pairs", path(&args.val_pairs))?;
        set(&mut doc, "paths", "vocab", path(&args.vocab))?;
        set(&mut doc, "paths", "checkpoint", path(&args.checkpoint))?;
        set(&mut doc, "train", "total_steps", int(args.steps)?)?;
        set(&mut doc, "train", "warmup_steps", int(args.warmup)?)?;
        set(&mut doc, "train", "batch_size", int(args.batch_size)?)?;
        set(&mut doc, "train", "accum_steps", int(args.accum_steps)?)?;
        set(&mut doc, "train", "seed", int(args.seed)?)?;
        set(&mut doc, "train", "lr_max", args.lr.map(Value::Float))?;
        set(&mut doc, "train", "alpha", args.alpha.map(Value::Float))?;
        set(
            &mut doc,
            "train",
            "weight_decay",
            args.weight_decay.map(Value::Float),
        )?;
        let train = section(&mut doc, "train")?;
        if !train.contains_key("total_steps") {
            return Err(Error::Config(
                "train.total_steps is required (set it in the config or pass --steps)".into(),
            ));
        }
        if !train.contains_key("warmup_steps") {
            // keep small runs valid, as TrainConfig::new does
            let total = train["total_steps"].as_integer().unwrap_or(0);
            train.insert(
                "warmup_steps".into(),
                Value::Integer(1000.min(total - 1).max(0)),
            );
        }
        let cfg: RunConfig = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Output directory: flag, then `GEOMTEXT_OUT_DIR`, then the config file,
/// then `./out`.
pub fn out_dir(flag: &Option<PathBuf>, configured: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| std::env::var_os("GEOMTEXT_OUT_DIR").map(PathBuf::from))
        .or_else(|| configured.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Fails early on an input path that does not exist.
pub fn require(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = p
        .clone()
        .ok_or_else(|| Error::Config(format!("missing {what} path")))?;
    existing(&p)?;
    Ok(p)
}

pub fn existing(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}
