use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Parameter {
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters grouped by the first path segment (`lm/…`, `cocon/…`,
/// `disc/…`). Whole groups can be frozen.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    frozen: BTreeSet<String>,
}

pub fn group_of(path: &str) -> &str {
    path.split('/').next().unwrap_or(path)
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::config(format!("duplicate parameter path `{path}`")));
        }
        self.params.insert(path, Parameter::new(value));
        Ok(())
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_normal(&mut self, path: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<()> {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("init std {std}: {e}")))?;
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(path, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn value_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(path.to_string()))
    }

    pub fn get(&self, path: &str) -> Option<&Parameter> {
        self.params.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self, group: Option<&str>) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| group.is_none_or(|g| group_of(k) == g))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze_group(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        !self.frozen.contains(group_of(path))
    }

    /// Moves every other store's parameters into this one.
    pub fn merge(&mut self, other: ParameterStore) -> Result<()> {
        for (path, p) in other.params {
            if self.params.contains_key(&path) {
                return Err(Error::config(format!("duplicate parameter path `{path}`")));
            }
            self.params.insert(path, p);
        }
        self.frozen.extend(other.frozen);
        Ok(())
    }

    /// Adds the gradients recorded on `tape` into the stored gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (path, grad) in tape.param_grads() {
            if let Some(p) = self.params.get_mut(path) {
                p.grad.iter_mut().zip(grad).for_each(|(a, g)| *a += g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self, group: Option<&str>) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| group.is_none_or(|g| group_of(k) == g))
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update on every unfrozen parameter, then clears
    /// all gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_step_group(cfg, None);
    }

    /// Adam restricted to one parameter group (or all unfrozen groups).
    pub fn adam_step_group(&mut self, cfg: &AdamConfig, group: Option<&str>) {
        for (path, p) in self.params.iter_mut() {
            let g_name = group_of(path);
            let selected = group.is_none_or(|g| g == g_name);
            if selected && !self.frozen.contains(g_name) {
                p.step += 1;
                let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
                let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
                let value = p.value.data_mut();
                for i in 0..value.len() {
                    let g = p.grad[i];
                    p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
                    p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = p.first_moment[i] / bc1;
                    let v_hat = p.second_moment[i] / bc2;
                    value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
            if selected {
                p.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// A copy holding only the parameters of one group.
    pub fn subset(&self, group: &str) -> ParameterStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| group_of(k) == group)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let frozen = self.frozen.iter().filter(|g| *g == group).cloned().collect();
        ParameterStore { params, frozen }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("cocon/w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.5);
        s.adam_step(&AdamConfig::with_lr(0.1));
        assert_eq!(s.value("cocon/w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn first_bias_corrected_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        s.params.get_mut("cocon/w").unwrap().grad[0] = 1.0;
        s.adam_step(&AdamConfig::with_lr(0.1));
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value("cocon/w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!(s.get("cocon/w").unwrap().grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn frozen_group_ignores_gradients() {
        let mut s = ParameterStore::new();
        s.insert("lm/w", Tensor::scalar(2.0)).unwrap();
        s.freeze_group("lm");
        s.params.get_mut("lm/w").unwrap().grad[0] = 3.0;
        s.adam_step(&AdamConfig::with_lr(0.1));
        assert_eq!(s.value("lm/w").unwrap().data()[0], 2.0);
        assert!(!s.is_trainable("lm/w"));
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let mut s = scalar_store(1.0);
        assert!(s.insert("cocon/w", Tensor::scalar(0.0)).is_err());
    }
}
