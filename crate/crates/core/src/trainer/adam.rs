use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradMap, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if unit(self.beta1) && unit(self.beta2) && self.eps > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(
                "Adam needs β1, β2 in [0, 1) and ε > 0".into(),
            ))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// First and second moments plus a step count for every parameter that
/// has received a gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
///
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`, with decay applied only to
/// parameters whose kind decays. Parameters without a gradient are left
/// untouched, decay included.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::contract(format!(
            "learning rate must be ≥ 0, got {lr}"
        )));
    }
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at entry {i}")));
        }
        let param = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
        if g.len() != param.tensor.numel() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{name}: gradient has {} values, parameter {}",
                    g.len(),
                    param.tensor.numel()
                ),
            ));
        }
        let c = state.config;
        let mo = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
        mo.t += 1;
        let bc1 = 1.0 - c.beta1.powi(mo.t as i32);
        let bc2 = 1.0 - c.beta2.powi(mo.t as i32);
        let wd = if param.kind.decays() {
            weight_decay
        } else {
            0.0
        };
        let theta = param.tensor.data_mut();
        for i in 0..g.len() {
            mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g[i];
            mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = mo.m[i] / bc1;
            let vh = mo.v[i] / bc2;
            theta[i] -= lr * (mh / (vh.sqrt() + c.eps) + wd * theta[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, Tensor};

    fn one(kind: ParamKind, v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::vector(vec![v]).unwrap(), kind)
            .unwrap();
        p
    }

    fn grad(v: f64) -> GradMap {
        GradMap::from([("x".to_string(), vec![v])])
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = one(ParamKind::Weight, 0.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(1.0), &mut s, 0.1, 0.0).unwrap();
        let x = p.tensor("x").unwrap().item();
        assert!((x + 0.1).abs() < 1e-9);
        assert_eq!(x, -0.1 * (1.0 / (1.0 + 1e-8)));
        assert_eq!(s.step_count("x"), 1);
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut p = one(ParamKind::Weight, 2.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &grad(0.0), &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p.tensor("x").unwrap().item(), 2.0);
        adam_step(&mut p, &grad(0.0), &mut s, 0.1, 0.05).unwrap();
        assert_eq!(p.tensor("x").unwrap().item(), 2.0 * (1.0 - 0.1 * 0.05));

        let mut b = one(ParamKind::Bias, 2.0);
        adam_step(&mut b, &grad(0.0), &mut AdamState::default(), 0.1, 0.05).unwrap();
        assert_eq!(b.tensor("x").unwrap().item(), 2.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one(ParamKind::Weight, 0.0);
        let err =
            adam_step(&mut p, &grad(f64::NAN), &mut AdamState::default(), 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("x"), "{err}");
    }
}
