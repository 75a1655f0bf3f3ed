//! Reverse-mode vs. central-difference gradient comparison (64-bit).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

// Denominator floor for the relative error, keeps near-zero gradients from
// turning round-off into huge ratios.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input tensor: max|analytic − numeric| / max(|analytic|∞, |numeric|∞, 1e-3).
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare reverse-mode gradients of the scalar `f` against central finite
/// differences with step `h`, for every element of every tensor in `params`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], what: &str| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss at {what}")));
        }
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = f(&g, &vars)?;
    if !g.item(loss).is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for pi in 0..params.len() {
        let mut num = vec![0.0; params[pi].len()];
        for (ei, slot) in num.iter_mut().enumerate() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = eval(&work, &format!("input {pi} element {ei} (+h)"))?;
            work[pi].data_mut()[ei] = orig - h;
            let down = eval(&work, &format!("input {pi} element {ei} (-h)"))?;
            work[pi].data_mut()[ei] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        numeric.push(Tensor::from_parts(params[pi].shape().to_vec(), num));
    }

    Ok(report(analytic, numeric))
}

fn report(analytic: Vec<Tensor<f64>>, numeric: Vec<Tensor<f64>>) -> GradCheckReport {
    let per_param: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let scale = a
                .data()
                .iter()
                .chain(n.data())
                .fold(REL_FLOOR, |m, x| m.max(x.abs()));
            a.max_abs_diff(n) / scale
        })
        .collect();
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        per_param,
        max_rel_error,
        analytic,
        numeric,
    }
}

/// Like [`grad_check`] for models that read named parameters: `names` are
/// made trainable (everything else frozen) and perturbed in place.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, names: &[String], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.set_trainable_prefix("", false);
    for n in names {
        let t = work.get(n)?.clone();
        work.insert(n.clone(), t, true);
    }
    let eval = |w: &ParamStore<f64>, what: &str| -> Result<f64> {
        let g = Graph::inference(w);
        let v = g.item(f(&g)?);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss at {what}")));
        }
        Ok(v)
    };

    let g = Graph::with_params(&work);
    let loss = f(&g)?;
    if !g.item(loss).is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| grads.param(n).unwrap_or_else(|| Tensor::zeros(work.get(n).expect("checked").shape())))
        .collect();
    drop(g);

    let mut numeric = Vec::with_capacity(names.len());
    for n in names {
        let len = work.get(n)?.len();
        let mut num = vec![0.0; len];
        for (ei, slot) in num.iter_mut().enumerate() {
            let orig = work.get(n)?.data()[ei];
            work.get_mut(n)?.data_mut()[ei] = orig + h;
            let up = eval(&work, &format!("{n}[{ei}] (+h)"))?;
            work.get_mut(n)?.data_mut()[ei] = orig - h;
            let down = eval(&work, &format!("{n}[{ei}] (-h)"))?;
            work.get_mut(n)?.data_mut()[ei] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        numeric.push(Tensor::from_parts(work.get(n)?.shape().to_vec(), num));
    }
    Ok(report(analytic, numeric))
}
