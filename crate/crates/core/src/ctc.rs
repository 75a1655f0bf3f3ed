//! Connectionist temporal classification: log-space forward-backward loss,
//! greedy decoding, and an exhaustive path-enumeration oracle.
//!
//! Log-probability rows have `V + 1` columns; column [`BLANK`] is the blank.

use crate::error::{Error, Result};
use crate::numcore::kernels::{argmax, log_add, log_sum_exp};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::par;

pub const BLANK: usize = 0;

/// Paths enumerated by [`ctc_brute_force`] are capped at this many frames.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 12;
const BRUTE_FORCE_MAX_PATHS: f64 = (1u64 << 28) as f64;

/// One utterance worth of CTC input.
#[derive(Clone, Debug)]
pub struct CtcItem<T> {
    /// U × (V+1) log-softmax rows.
    pub log_probs: Tensor<T>,
    /// Label ids in 1..=V, no blanks.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CtcOutput<T> {
    /// Negative log-likelihood; `+∞` when no alignment exists.
    pub loss: T,
    pub feasible: bool,
    /// d loss / d log_probs, zero when infeasible.
    pub grad: Tensor<T>,
}

/// Minimum frame count for `labels`: one per label plus one blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, labels: &[usize]) -> bool {
    min_frames(labels) <= frames
}

fn validate<T: Real>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<()> {
    let (u, c) = log_probs.dims2();
    if log_probs.shape().len() != 2 || c < 2 || u == 0 {
        return Err(Error::shape("ctc", format!("log_probs {:?}", log_probs.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= c) {
        return Err(Error::Input(format!("label {bad} outside 1..{}", c - 1)));
    }
    for t in 0..u {
        let z = log_sum_exp(log_probs.row(t)).as_f64();
        if !(z.abs() <= 1e-5) {
            return Err(Error::Input(format!(
                "row {t} is not log-normalized (logsumexp = {z})"
            )));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `labels` and its gradient w.r.t. the log-probabilities.
pub fn ctc_loss<T: Real>(item: &CtcItem<T>) -> Result<CtcOutput<T>> {
    let lp = &item.log_probs;
    let labels = &item.labels;
    validate(lp, labels)?;
    let (u, c) = lp.dims2();
    if !is_feasible(u, labels) {
        return Ok(CtcOutput {
            loss: T::infinity(),
            feasible: false,
            grad: Tensor::zeros(lp.shape()),
        });
    }

    // Blank-extended label sequence: ∅ l1 ∅ l2 ... lL ∅
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK } else { labels[s / 2] })
        .collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = T::neg_infinity();
    let y = |t: usize, k: usize| lp.data()[t * c + k];

    let mut alpha = vec![ninf; u * s_len];
    alpha[0] = y(0, ext[0]);
    if s_len > 1 {
        alpha[1] = y(0, ext[1]);
    }
    for t in 1..u {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + y(t, ext[s]) };
        }
    }
    let last = (u - 1) * s_len;
    let mut log_lik = alpha[last + s_len - 1];
    if s_len > 1 {
        log_lik = log_add(log_lik, alpha[last + s_len - 2]);
    }

    let mut beta = vec![ninf; u * s_len];
    beta[last + s_len - 1] = y(u - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = y(u - 1, ext[s_len - 2]);
    }
    for t in (0..u - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + y(t, ext[s]) };
        }
    }

    // ∂(−log p)/∂log y_t(k) = −Σ_{s: ext_s = k} α_t(s) β_t(s) / (y_t(k) · p)
    let mut grad = vec![T::zero(); u * c];
    let mut acc = vec![ninf; c];
    for t in 0..u {
        acc.iter_mut().for_each(|a| *a = ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            acc[ext[s]] = log_add(acc[ext[s]], ab);
        }
        for k in 0..c {
            if acc[k] != ninf {
                grad[t * c + k] = -(acc[k] - y(t, k) - log_lik).exp();
            }
        }
    }

    Ok(CtcOutput {
        loss: -log_lik,
        feasible: true,
        grad: Tensor::from_parts(lp.shape().to_vec(), grad),
    })
}

/// Exhaustive oracle: sums the probability of every length-U path that
/// collapses to `labels`. Refuses more than [`BRUTE_FORCE_MAX_FRAMES`] frames.
pub fn ctc_brute_force<T: Real>(item: &CtcItem<T>) -> Result<f64> {
    let lp = &item.log_probs;
    validate(lp, &item.labels)?;
    let (u, c) = lp.dims2();
    if u > BRUTE_FORCE_MAX_FRAMES || (c as f64).powi(u as i32) > BRUTE_FORCE_MAX_PATHS {
        return Err(Error::Input(format!(
            "brute force over {c}^{u} paths refused (at most {BRUTE_FORCE_MAX_FRAMES} frames)"
        )));
    }
    let mut path = vec![0usize; u];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == item.labels {
            terms.push(
                path.iter()
                    .enumerate()
                    .map(|(t, &k)| lp.data()[t * c + k].as_f64())
                    .sum::<f64>(),
            );
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == u {
                return Ok(-log_sum_exp(&terms));
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax followed by [`collapse`].
pub fn ctc_greedy_decode<T: Real>(log_probs: &Tensor<T>) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    collapse(&path)
}

/// Mean loss over a batch; infeasible items are skipped and counted.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub mean_loss: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn batch_ctc_loss<T: Real>(items: &[CtcItem<T>]) -> Result<BatchLoss> {
    let outs = par::map(items, ctc_loss);
    reduce_batch(outs)
}

pub fn batch_ctc_loss_sequential<T: Real>(items: &[CtcItem<T>]) -> Result<BatchLoss> {
    let outs = par::map_sequential(items, ctc_loss);
    reduce_batch(outs)
}

fn reduce_batch<T: Real>(outs: Vec<Result<CtcOutput<T>>>) -> Result<BatchLoss> {
    let mut sum = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for o in outs {
        let o = o?;
        if o.feasible {
            sum += o.loss.as_f64();
            used += 1;
        } else {
            skipped += 1;
        }
    }
    Ok(BatchLoss {
        mean_loss: if used > 0 { sum / used as f64 } else { f64::INFINITY },
        used,
        skipped,
    })
}

/// CTC loss as a graph node on top of log-probabilities recorded in `g`.
/// Errors on infeasible items so the graph never holds an infinite value.
pub fn ctc_graph_loss<T: Real>(g: &Graph<'_, T>, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let out = ctc_loss(&CtcItem {
        log_probs: g.value(log_probs),
        labels: labels.to_vec(),
    })?;
    if !out.feasible {
        return Err(Error::Input(format!(
            "{} labels cannot align to {} frames",
            labels.len(),
            g.dims(log_probs).0
        )));
    }
    g.custom_scalar(log_probs, out.loss, out.grad.into_vec())
}
