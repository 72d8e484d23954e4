//! Named parameter storage, initialization and the Adam update.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Ordered parameter table. Insertion order is the canonical order used by
/// checkpoints and gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    step_count: u64,
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`]'s order.
/// `None` means the parameter did not take part in the pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[f64]> {
        self.slots.get(idx).and_then(|s| s.as_deref())
    }

    /// `self += other`, slot by slot.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        let idx = self.params.len();
        self.params.push(Param {
            name: name.clone(),
            grad: Tensor::zeros(value.shape().to_vec()),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.index.insert(name, idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn by_index(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the stored gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Bias-corrected Adam step over every parameter. Nothing is modified
    /// when any gradient is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(bad) = self.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Glorot-uniform initialization on `±sqrt(6/(fan_in+fan_out))` for a 2-D
/// `[fan_in × fan_out]` shape.
pub fn xavier_init(rng: &mut Rng, shape: [usize; 2]) -> Tensor {
    let bound = xavier_bound(shape);
    let data = (0..shape[0] * shape[1])
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn xavier_bound(shape: [usize; 2]) -> f64 {
    (6.0 / (shape[0] + shape[1]) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(&[1.0]);
        assert!(s.insert("w", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(&[1.0, -2.0, 3.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut s = store_with(&[0.0, 0.0, 0.0]);
        s.params[0].grad = Tensor::new([3], vec![0.3, -5.0, 1e-2]).unwrap();
        let cfg = AdamConfig::default();
        s.adam_step(&cfg).unwrap();
        let w = s.get("w").unwrap().value.data();
        for (wi, sign) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((wi - sign * cfg.lr).abs() < 1e-9, "{wi}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store_with(&[1.0]);
        s.params[0].grad = Tensor::new([1], vec![f64::NAN]).unwrap();
        match s.adam_step(&AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step_count(), 0);
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn zero_grads_clears() {
        let mut s = store_with(&[1.0, 2.0]);
        let mut g = Gradients::zeros_like(&s);
        g.slots[0] = Some(vec![3.0, 4.0]);
        s.accumulate(&g);
        s.accumulate(&g);
        assert_eq!(s.get("w").unwrap().grad.data(), &[6.0, 8.0]);
        s.zero_grads();
        assert!(s.get("w").unwrap().grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let shape = [40, 25];
        let bound = xavier_bound(shape);
        let a = xavier_init(&mut Rng::new(3), shape);
        let b = xavier_init(&mut Rng::new(3), shape);
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        // U(-b, b) has std b/sqrt(3); the sample mean of n draws has std b/sqrt(3n).
        let n = a.len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * bound / (3.0 * n).sqrt());
    }
}
