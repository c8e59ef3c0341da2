//! Named parameter tensors with freeze flags and Adam state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    grad: Vec<f32>,
    grad_ready: bool,
    moment1: Option<Vec<f32>>,
    moment2: Option<Vec<f32>>,
}

/// Map from dotted names to tensors, with frozen name prefixes excluded from
/// optimization. Iteration order is the name order (BTreeMap), so training is
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
    frozen: Vec<String>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let n = value.numel();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: vec![0.0; n],
                grad_ready: false,
                moment1: None,
                moment2: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::TrainingState(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::TrainingState(format!("unknown parameter {name}")))
    }

    pub fn grad_of(&self, name: &str) -> Result<&[f32]> {
        self.entries
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| Error::TrainingState(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace the frozen prefix set. Clears Adam state so stale moments from
    /// a previous mode never leak into the next run.
    pub fn set_frozen(&mut self, prefixes: Vec<String>) {
        self.frozen = prefixes;
        for p in self.entries.values_mut() {
            p.moment1 = None;
            p.moment2 = None;
        }
        self.step = 0;
    }

    pub fn frozen_prefixes(&self) -> &[String] {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.grad_ready = false;
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f32]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::TrainingState(format!("unknown parameter {name}")))?;
        if p.grad.len() != grad.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad".into(),
                lhs: vec![p.grad.len()],
                rhs: vec![grad.len()],
            });
        }
        for (dst, src) in p.grad.iter_mut().zip(grad) {
            *dst += src;
        }
        p.grad_ready = true;
        Ok(())
    }

    /// Total element count of non-frozen tensors.
    pub fn trainable_param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// One Adam step with bias correction over non-frozen parameters.
    /// Frozen tensors are untouched; gradients are cleared afterward.
    pub fn adam_step(&mut self, hyper: &AdamHyper) -> Result<()> {
        let frozen = self.frozen.clone();
        let is_frozen = |name: &str| frozen.iter().any(|p| name.starts_with(p.as_str()));
        for (name, p) in self.entries.iter() {
            if !is_frozen(name) && !p.grad_ready {
                return Err(Error::TrainingState(format!(
                    "missing gradient for trainable parameter {name}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (name, p) in self.entries.iter_mut() {
            if is_frozen(name) {
                continue;
            }
            let n = p.value.numel();
            let m = p.moment1.get_or_insert_with(|| vec![0.0; n]);
            let v = p.moment2.get_or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = p.grad[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value.data[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
            if let Some((index, value)) = p.value.first_non_finite() {
                return Err(Error::NonFinite {
                    op: format!("adam_step({name})"),
                    index,
                    shape: p.value.shape.clone(),
                    value,
                });
            }
        }
        self.zero_grad();
        Ok(())
    }
}
