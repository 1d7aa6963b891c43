//! Named parameter tensors, freezing, and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Encoder unit that can be frozen: the input projection or one of the four stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FreezeUnit {
    Proj,
    Stage(u8),
}

impl FreezeUnit {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "proj" => Ok(FreezeUnit::Proj),
            "1" => Ok(FreezeUnit::Stage(1)),
            "2" => Ok(FreezeUnit::Stage(2)),
            "3" => Ok(FreezeUnit::Stage(3)),
            "4" => Ok(FreezeUnit::Stage(4)),
            other => Err(Error::Config(format!(
                "unknown frozen unit `{other}` (expected proj, 1, 2, 3 or 4)"
            ))),
        }
    }

    pub fn label(self) -> String {
        match self {
            FreezeUnit::Proj => "proj".into(),
            FreezeUnit::Stage(s) => s.to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Set for encoder parameters; used by [`ParamStore::freeze`].
    pub unit: Option<FreezeUnit>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, unit: Option<FreezeUnit>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable: true,
            unit,
        });
        ParamId(id)
    }

    /// Truncated normal (|x| ≤ 2σ) weight.
    pub fn add_trunc_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        unit: Option<FreezeUnit>,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data).unwrap(), unit)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Marks every encoder parameter whose unit is in `units` as frozen; all
    /// other parameters become trainable.
    pub fn freeze(&mut self, units: &[FreezeUnit]) {
        for p in &mut self.params {
            p.trainable = !p.unit.is_some_and(|u| units.contains(&u));
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Per-parameter gradient accumulator, indexed like the store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) m: Vec<Option<Tensor>>,
    pub(crate) v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in store.ids() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (rows, cols) = g.shape();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let w = store.value_mut(id).data_mut();
            for (((wi, &gi), mi), vi) in w
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn moments(&self, id: ParamId) -> (Option<&Tensor>, Option<&Tensor>) {
        (self.m[id.0].as_ref(), self.v[id.0].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(1, 2, 1.0), Some(FreezeUnit::Stage(1)));
        let b = store.add("b", Tensor::filled(1, 2, 1.0), Some(FreezeUnit::Stage(3)));
        store.freeze(&[FreezeUnit::Stage(1)]);
        let mut grads = Gradients::new(store.len());
        grads.accumulate(a, &Tensor::filled(1, 2, 0.5));
        grads.accumulate(b, &Tensor::filled(1, 2, 0.5));
        let mut adam = Adam::new(AdamConfig::default(), store.len());
        for _ in 0..5 {
            adam.step(&mut store, &grads);
        }
        assert_eq!(store.value(a).data(), &[1.0, 1.0]);
        assert!(store.value(b).data()[0] < 1.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) (up to eps)
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::filled(1, 1, 0.0), None);
        let mut grads = Gradients::new(1);
        grads.accumulate(a, &Tensor::filled(1, 1, -3.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, 1);
        adam.step(&mut store, &grads);
        assert!((store.value(a).data()[0] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn parse_units() {
        assert_eq!(FreezeUnit::parse("proj").unwrap(), FreezeUnit::Proj);
        assert_eq!(FreezeUnit::parse("3").unwrap(), FreezeUnit::Stage(3));
        assert!(FreezeUnit::parse("5").is_err());
    }
}
