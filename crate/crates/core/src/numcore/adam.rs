use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Moment buffers for every parameter the optimizer has touched.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of `params` from `grads`.
///
/// The whole update is validated before anything is written: on a shape
/// mismatch, a frozen target, or a non-finite gradient, nothing changes.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .param(name)
            .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter {name}")))?;
        if !p.trainable {
            return Err(Error::Input(format!("gradient for frozen parameter {name}")));
        }
        if p.tensor.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: param {:?} grad {:?}", p.tensor.shape(), g.shape()),
            ));
        }
        if let Some(m) = state.m.get(name) {
            if m.shape() != g.shape() {
                return Err(Error::shape("adam_step", format!("{name}: moment shape drifted")));
            }
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at element {i}; update rejected"
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
    let (lr, bc1, bc2) = (T::of(lr), T::of(bc1), T::of(bc2));

    for (name, g) in grads {
        let shape = g.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape));
        let m = m.data_mut();
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(&shape))
            .data_mut();
        let p = params.get_mut(name)?.data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
