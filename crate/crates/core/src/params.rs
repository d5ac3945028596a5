//! Named parameters, their gradients, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self {
            value,
            grad: None,
            m,
            v,
        }
    }
}

/// Parameters keyed by dotted path, e.g. `enc.shared.layer0.attn.wq`.
///
/// Iteration order is the lexicographic order of names, which keeps
/// initialization, optimization and serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Integrity(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    /// Weight matrix drawn from `uniform(-bound, bound)`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<()> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn init_const(&mut self, name: impl Into<String>, len: usize, value: f64) -> Result<()> {
        self.insert(name, Tensor::full(&[len], value))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    /// Replaces a parameter's values; the shape is fixed at insertion.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Integrity(format!(
                "shape of {name} is {:?}, refusing {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Mutable access to one scalar, used by finite-difference checks.
    pub fn scalar_mut(&mut self, name: &str, index: usize) -> Result<&mut f64> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
        p.value
            .data_mut()
            .get_mut(index)
            .ok_or_else(|| Error::Integrity(format!("{name}[{index}] out of range")))
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
        if grad.len() != p.value.len() {
            return Err(Error::Integrity(format!("gradient size mismatch for {name}")));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moves parameters to new names; values are untouched.
    pub fn rename(&mut self, mapping: &[(String, String)]) -> Result<()> {
        let mut moved = Vec::with_capacity(mapping.len());
        for (from, _) in mapping {
            let p = self
                .params
                .remove(from)
                .ok_or_else(|| Error::Integrity(format!("unknown parameter {from}")))?;
            moved.push(p);
        }
        for ((_, to), p) in mapping.iter().zip(moved) {
            if self.params.insert(to.clone(), p).is_some() {
                return Err(Error::Integrity(format!("rename collides with {to}")));
            }
        }
        Ok(())
    }

    /// Flattens all values, in name order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// One bias-corrected Adam update over every parameter, then clears gradients.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    if let Some((name, _)) = store.params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::Integrity(format!("parameter {name} has no gradient")));
    }
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in store.params.values_mut() {
        let g = p.grad.take().expect("checked above");
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
