//! Named-parameter layer helpers shared by the encoder, bridge and LM.

use std::cell::RefCell;
use std::sync::Arc;

use rand::RngExt;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng::Rng;

/// Training-time dropout with its own random stream.
pub struct Dropout {
    pub p: f64,
    rng: RefCell<Rng>,
}

impl Dropout {
    pub fn new(p: f64, rng: Rng) -> Self {
        Dropout {
            p,
            rng: RefCell::new(rng),
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let n = g.value(x).len();
        let keep = T::of(1.0 / (1.0 - self.p));
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < self.p { T::zero() } else { keep })
            .collect();
        g.mul_const(x, Arc::new(mask))
    }
}

pub fn dropout<T: Real>(g: &Graph<'_, T>, x: Var, d: Option<&Dropout>) -> Result<Var> {
    match d {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// x · Wᵀ (+ b) with `{prefix}.weight` stored as [out, in].
pub fn linear<T: Real>(g: &Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let b = if g.has_param(&bias_name) {
        Some(g.param(&bias_name)?)
    } else {
        None
    };
    g.linear(x, w, b)
}

pub fn layer_norm<T: Real>(g: &Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Causal keep-mask for an n × n score matrix.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Scaled dot-product attention over pre-projected q, k, v, split into heads.
pub fn attention<T: Real>(
    g: &Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    num_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.dims(q).1;
    let dh = d / num_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.scale(g.matmul_nt(qh, kh)?, scale)?;
        let probs = match mask {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores)?,
        };
        heads.push(g.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

// ---- initialization ----

pub fn uniform<T: Real>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub fn normal<T: Real>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Register `{prefix}.weight` [out, in] (and `.bias` if asked) with U(±1/√in).
pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    bias: bool,
) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, &[out_dim, in_dim], bound), true);
    if bias {
        store.insert(format!("{prefix}.bias"), uniform(rng, &[out_dim], bound), true);
    }
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], T::one()), true);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_mask(3);
        assert_eq!(
            m,
            vec![true, false, false, true, true, false, true, true, true]
        );
    }

    #[test]
    fn dropout_zero_is_identity_and_scales_kept_units() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[100], 1.0));
        let d0 = Dropout::new(0.0, crate::rng::component_rng(0, "d"));
        assert_eq!(d0.apply(&g, x).unwrap(), x);
        let d = Dropout::new(0.5, crate::rng::component_rng(0, "d"));
        let y = g.value(d.apply(&g, x).unwrap());
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
