//! Optimization: warmup/linear-decay schedule, Adam with decoupled weight
//! decay, the pretraining and fine-tuning loops, and checkpoints.

mod adam;
mod checkpoint;
mod finetune;
mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{GeomEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{CaptionConfig, DenoiseHeadConfig, NormStats, PropertyHeadConfig};
use crate::objectives::{ContrastiveConfig, DenoiseConfig};
use crate::tensor::ModelParams;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_load, checkpoint_save, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use finetune::{caption_train, fit_property, FinetuneLog, FinetuneStep};
pub use pretrain::{pretrain, record_seed, LogEntry, PretrainLog};

fn default_lr() -> f64 {
    1e-4
}
fn default_warmup() -> usize {
    1000
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_accum() -> usize {
    4
}
fn default_batch() -> usize {
    64
}
fn default_alpha() -> f64 {
    0.4
}
fn default_tau() -> f64 {
    0.1
}

/// Optimization settings. `total_steps` has no default: the decay horizon
/// must be chosen explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr_max: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Micro-batches per optimizer step.
    #[serde(default = "default_accum")]
    pub accum_steps: usize,
    /// Pairs per micro-batch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Weight of the denoising loss.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub temperature: f64,
    #[serde(default)]
    pub denoise: DenoiseConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(total_steps: usize) -> Self {
        TrainConfig {
            lr_max: default_lr(),
            warmup_steps: default_warmup().min(total_steps.saturating_sub(1)),
            total_steps,
            weight_decay: default_weight_decay(),
            accum_steps: default_accum(),
            batch_size: default_batch(),
            alpha: default_alpha(),
            temperature: default_tau(),
            denoise: DenoiseConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
        }
    }

    /// Pairs consumed by one optimizer step.
    pub fn window(&self) -> usize {
        self.accum_steps * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.accum_steps == 0 || self.batch_size == 0 {
            return bad("accum_steps and batch_size must be at least 1".into());
        }
        if !(self.lr_max > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr_max must be positive and weight_decay non-negative".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("α must be ≥ 0, got {}", self.alpha));
        }
        self.contrastive().validate()?;
        self.denoise.validate()?;
        self.adam.validate()
    }
}

/// Linear warmup to `lr_max` at `warmup_steps`, then linear decay to zero
/// at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return Ok(cfg.lr_max * step as f64 / cfg.warmup_steps as f64);
    }
    Ok(cfg.lr_max * (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64)
}

/// Architecture of every model component; stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub geom: GeomEncoderConfig,
    pub text: TextEncoderConfig,
    pub denoise_head: DenoiseHeadConfig,
    pub property: Option<PropertyHeadConfig>,
    pub property_stats: Option<NormStats>,
    pub caption: Option<CaptionConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        self.text.validate()?;
        if self.geom.proj_dim != self.text.proj_dim {
            return Err(Error::Config(format!(
                "geometry proj_dim {} differs from text proj_dim {}",
                self.geom.proj_dim, self.text.proj_dim
            )));
        }
        if let Some(c) = &self.caption {
            c.validate()?;
        }
        Ok(())
    }

    /// Fresh parameters for every configured component, seeded.
    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        self.geom.init_params(&mut params, &mut rng)?;
        self.text.init_params(&mut params, &mut rng)?;
        self.denoise_head
            .init_params(&self.geom, &mut params, &mut rng)?;
        if let Some(p) = &self.property {
            p.init_params(&self.geom, &mut params, &mut rng)?;
        }
        if let Some(c) = &self.caption {
            c.init_params(&self.geom, &mut params, &mut rng)?;
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::new(10_000)
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(1000, &c).unwrap(), 1e-4);
        assert_eq!(lr_at(500, &c).unwrap(), 5e-5);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(c.total_steps, &c).unwrap(), 0.0);
        assert!(lr_at(c.total_steps + 1, &c).is_err());
    }

    #[test]
    fn schedule_peaks_at_warmup_and_is_piecewise_linear() {
        let c = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::new(50)
        };
        let lrs: Vec<f64> = (0..=50).map(|s| lr_at(s, &c).unwrap()).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(lrs[10], peak);
        for s in 1..50 {
            if s != 10 {
                let second = lrs[s + 1] - 2.0 * lrs[s] + lrs[s - 1];
                assert!(second.abs() < 1e-18, "kink at {s}");
            }
        }
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        let c = TrainConfig {
            warmup_steps: 10_000,
            ..cfg()
        };
        assert!(c.validate().is_err());
        let missing: std::result::Result<TrainConfig, _> =
            serde_json::from_str("{\"lr_max\": 0.1}");
        assert!(missing.is_err());
        let unknown: std::result::Result<TrainConfig, _> =
            serde_json::from_str("{\"total_steps\": 5, \"lr\": 0.1}");
        assert!(unknown.is_err());
    }
}
