use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{format_shape, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Role of a parameter; decides initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Per-parameter gradients keyed by parameter path.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Named parameter collection, ordered by path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Param { tensor, kind });
        Ok(())
    }

    /// Inserts a freshly initialized parameter. Weights draw from
    /// uniform(−1/√fan_in, 1/√fan_in); embeddings treat the one-hot input
    /// as fan-in 1; biases start at zero and norm gains at one.
    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        kind: ParamKind,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = match kind {
            ParamKind::Bias => vec![0.0; n],
            ParamKind::Norm => vec![1.0; n],
            ParamKind::Weight => {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            ParamKind::Embedding => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        self.insert(name, Tensor::new(shape, data)?, kind)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ModelParams) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.tensor, p.kind)?;
        }
        Ok(())
    }

    /// Copy of the entries whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelParams {
        ModelParams {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds gradients into the stored `.grad` of each named parameter.
    pub fn accumulate(&mut self, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            p.tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Shapes keyed by name.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.shape().to_vec()))
            .collect()
    }

    /// Largest absolute elementwise difference against another store with the same layout.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, p) in &self.entries {
            let q = other.tensor(name)?;
            if q.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "max_abs_diff",
                    format!(
                        "{name}: {} vs {}",
                        format_shape(p.tensor.shape()),
                        format_shape(q.shape())
                    ),
                ));
            }
            for (a, b) in p.tensor.data().iter().zip(q.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// Attaches parameters to a tape on first use.
///
/// Parameters under a frozen prefix enter the tape as constants and never
/// receive gradients.
pub struct Binder<'p> {
    params: &'p ModelParams,
    frozen: Vec<String>,
    bound: RefCell<HashMap<String, Var>>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Binder {
            params,
            frozen: Vec::new(),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_frozen(params: &'p ModelParams, frozen: &[&str]) -> Self {
        Binder {
            params,
            frozen: frozen.iter().map(|s| s.to_string()).collect(),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn get(&self, tape: &Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.params.tensor(name)?;
        let v = tape.leaf(t, !self.is_frozen(name));
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound, trainable parameter.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    /// Like [`Binder::gradients`], moving buffers out of `grads`.
    pub fn take_gradients(&self, grads: &mut Gradients) -> GradMap {
        self.bound
            .borrow()
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Adds `src` into `dst` entrywise, inserting missing names.
pub fn add_grads(dst: &mut GradMap, src: GradMap) {
    for (name, g) in src {
        match dst.get_mut(&name) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => {
                dst.insert(name, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::new();
        p.init("w", vec![16, 4], ParamKind::Weight, &mut rng)
            .unwrap();
        p.init("b", vec![4], ParamKind::Bias, &mut rng).unwrap();
        p.init("g", vec![4], ParamKind::Norm, &mut rng).unwrap();
        assert!(p.tensor("w").unwrap().data().iter().all(|v| v.abs() < 0.25));
        assert!(p.tensor("b").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(p.tensor("g").unwrap().data().iter().all(|v| *v == 1.0));
        assert!(p.init("w", vec![1], ParamKind::Bias, &mut rng).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut p = ModelParams::new();
        p.insert(
            "enc.w",
            Tensor::vector(vec![1.0, 2.0]).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        p.insert(
            "head.w",
            Tensor::vector(vec![3.0, 4.0]).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        let tape = Tape::new();
        let b = Binder::with_frozen(&p, &["enc."]);
        let x = tape
            .mul(
                b.get(&tape, "enc.w").unwrap(),
                b.get(&tape, "head.w").unwrap(),
            )
            .unwrap();
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        let map = b.gradients(&g);
        assert_eq!(map.len(), 1);
        assert_eq!(map["head.w"], vec![1.0, 2.0]);
    }
}
