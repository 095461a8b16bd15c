use indexmap::IndexMap;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Moment buffers for every trainable entry of one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub config: AdamConfig,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: IndexMap<String, Vec<f64>> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.to_string(), vec![0.0; p.tensor.len()]))
            .collect();
        Self {
            step: 0,
            config,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn tracked_scalars(&self) -> usize {
        self.m.values().map(Vec::len).sum()
    }
}

/// One bias-corrected Adam update over the trainable entries, then clears
/// all gradients. Returns the number of scalars updated.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<usize> {
    let trainable = params.iter().filter(|(_, p)| p.trainable).count();
    if trainable != state.m.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors but {} are trainable",
            state.m.len(),
            trainable
        )));
    }
    for (name, p) in params.iter() {
        if p.trainable && !p.tensor.has_grad() {
            return Err(Error::State(format!(
                "no gradient for trainable parameter `{name}`"
            )));
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut updated = 0;
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(Error::State(format!("no moment buffers for `{name}`")));
        };
        let grad = p.tensor.grad().expect("checked above").to_vec();
        for (((w, g), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        updated += grad.len();
    }
    params.clear_grads();
    Ok(updated)
}
