use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::AutodiffError;

/// Named trainable tensors plus non-trainable buffers (batch-norm running
/// statistics). Names iterate in sorted order, which fixes the update order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    pub trainable: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Graph handles for one binding of a [`Params`] set.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.trainable.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.trainable.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.trainable.values().map(Tensor::len).sum()
    }

    /// Register every trainable tensor as a differentiable graph input.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .trainable
            .iter()
            .map(|(k, t)| (k.clone(), g.input(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Register every trainable tensor as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .trainable
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Gradients after `Graph::backward`; parameters the output does not
    /// depend on get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (k.clone(), grad)
            })
            .collect()
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
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update over every parameter that has a gradient.
pub fn adam_step(
    params: &mut Params,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    for (name, g) in grads {
        let p = params
            .trainable
            .get(name)
            .ok_or_else(|| AutodiffError::InvalidArgument { op: "adam_step", msg: format!("unknown parameter `{name}`") })?;
        if p.len() != g.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.trainable.get_mut(name).unwrap();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
