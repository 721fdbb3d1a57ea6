//! Checkpoint layout: a UTF-8 manifest followed by raw little-endian f32
//! values.
//!
//! ```text
//! GEOMTEXT-CHECKPOINT 1
//! config {"geom":{...},...}
//! param geom.atom_embed 55×64 0 f32
//! ...
//! end
//! <data>
//! ```
//!
//! Offsets count bytes from the start of the data section.

use std::fs;
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{format_shape, ModelParams, Tensor};

pub const CHECKPOINT_MAGIC: &str = "GEOMTEXT-CHECKPOINT 1";

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>> {
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nconfig {}\n",
        serde_json::to_string(config)?
    );
    let mut data = Vec::with_capacity(params.num_values() * 4);
    for (name, p) in params.iter() {
        header.push_str(&format!(
            "param {name} {} {} f32\n",
            format_shape(p.tensor.shape()),
            data.len()
        ));
        for &v in p.tensor.data() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend(data);
    Ok(out)
}

pub fn checkpoint_save(
    params: &ModelParams,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, write_checkpoint(params, config)?)?;
    Ok(())
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split('×')
        .map(|d| d.parse().ok().filter(|&d| d > 0))
        .collect()
}

/// Parses a checkpoint, checking every entry against the parameter layout
/// its config implies.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut lines_end = None;
    let mut pos = 0;
    let mut lines = Vec::new();
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("truncated manifest"))?;
        let line =
            std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| err("manifest is not UTF-8"))?;
        pos += nl + 1;
        if line == "end" {
            lines_end = Some(pos);
            break;
        }
        lines.push(line);
    }
    let data = &bytes[lines_end.ok_or_else(|| err("manifest has no end line"))?..];
    if lines.first() != Some(&CHECKPOINT_MAGIC) {
        return Err(err("not a checkpoint (bad magic line)"));
    }
    let config: ModelConfig = lines
        .get(1)
        .and_then(|l| l.strip_prefix("config "))
        .ok_or_else(|| err("missing config line"))
        .and_then(|c| serde_json::from_str(c).map_err(|e| err(format!("config: {e}"))))?;
    let template = config.init_params(0)?;

    let mut entries = Vec::with_capacity(lines.len() - 2);
    for line in &lines[2..] {
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "param" {
            return Err(err(format!("malformed manifest line {line:?}")));
        }
        let name = f[1];
        let expected = template
            .get(name)
            .ok_or_else(|| err(format!("{name}: not part of the configured model")))?;
        let shape =
            parse_shape(f[2]).ok_or_else(|| err(format!("{name}: bad shape {:?}", f[2])))?;
        if shape != expected.tensor.shape() {
            return Err(err(format!(
                "{name}: expected {}, found {}",
                format_shape(expected.tensor.shape()),
                f[2]
            )));
        }
        if f[4] != "f32" {
            return Err(err(format!("{name}: unsupported dtype {}", f[4])));
        }
        let offset: usize = f[3]
            .parse()
            .map_err(|_| err(format!("{name}: bad offset {:?}", f[3])))?;
        entries.push((name, shape, offset, expected.kind));
    }
    if let Some(missing) = template
        .names()
        .find(|n| !entries.iter().any(|e| e.0 == *n))
    {
        return Err(err(format!("{missing}: missing from checkpoint")));
    }

    let mut params = ModelParams::new();
    for (name, shape, offset, kind) in entries {
        let end = offset + 4 * shape.iter().product::<usize>();
        if end > data.len() {
            return Err(err(format!(
                "{name}: truncated data (needs bytes {offset}..{end}, file has {})",
                data.len()
            )));
        }
        let values = data[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params
            .insert(name, Tensor::new(shape, values)?, kind)
            .map_err(|e| err(format!("{name}: {e}")))?;
    }
    Ok((params, config))
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{GeomEncoderConfig, TextEncoderConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            geom: GeomEncoderConfig {
                atom_embed_dim: 8,
                num_heads: 2,
                num_layers: 1,
                proj_dim: 4,
                ..GeomEncoderConfig::default()
            },
            text: TextEncoderConfig {
                vocab_size: 12,
                token_embed_dim: 8,
                num_heads: 2,
                num_layers: 1,
                max_seq_len: 8,
                proj_dim: 4,
                proj_hidden: 8,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_at_f32() {
        let cfg = tiny();
        let p = cfg.init_params(3).unwrap();
        let (back, cfg2) = read_checkpoint(&write_checkpoint(&p, &cfg).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        for (name, q) in back.iter() {
            let orig = p.tensor(name).unwrap();
            assert_eq!(q.tensor.shape(), orig.shape());
            for (a, b) in q.tensor.data().iter().zip(orig.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn tampered_shape_is_named() {
        let cfg = tiny();
        let p = cfg.init_params(3).unwrap();
        let bytes = write_checkpoint(&p, &cfg).unwrap();
        let split = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let header = std::str::from_utf8(&bytes[..split])
            .unwrap()
            .replace("geom.layer0.attn.wq 8×8", "geom.layer0.attn.wq 8×7");
        let mut tampered = header.into_bytes();
        tampered.extend_from_slice(&bytes[split..]);
        let e = read_checkpoint(&tampered).unwrap_err().to_string();
        assert!(
            e.contains("geom.layer0.attn.wq: expected 8×8, found 8×7"),
            "{e}"
        );
    }

    #[test]
    fn truncated_file_names_entry() {
        let cfg = tiny();
        let p = cfg.init_params(3).unwrap();
        let mut bytes = write_checkpoint(&p, &cfg).unwrap();
        bytes.truncate(bytes.len() - 3);
        let e = read_checkpoint(&bytes).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
        assert!(read_checkpoint(b"junk\nend\n").is_err());
    }
}
