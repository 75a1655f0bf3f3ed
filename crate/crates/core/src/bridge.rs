//! Frame stacking and projection into the LM embedding space.
//!
//! Every `n` consecutive encoder vectors are concatenated in temporal order
//! (earliest vector in the lowest indices) into one `n·d`-wide frame; a short
//! tail is zero-padded. A single affine map then projects to the LM width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng::component_rng;

pub const PREFIX: &str = "bridge.";
const PROJ: &str = "bridge.proj";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub stack_n: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig { stack_n: 3 }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack_n < 1 {
            return Err(Error::Config("bridge: stack_n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stacking geometry once the encoder and LM widths are known.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub n: usize,
    pub d_encoder: usize,
    pub d_llm: usize,
}

impl StackConfig {
    /// Embedding duration after stacking 80 ms encoder frames.
    pub fn frame_ms(&self, encoder_frame_ms: usize) -> usize {
        self.n * encoder_frame_ms
    }
}

/// ⌈U / n⌉
pub fn output_len(u: usize, n: usize) -> usize {
    u.div_ceil(n)
}

/// LM-space embedding count for T feature frames: ⌈⌈T/stride⌉/n⌉.
pub fn embeddings_for_frames(t: usize, stride: usize, n: usize) -> usize {
    output_len(crate::encoder::output_len(t, stride), n)
}

pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &StackConfig, seed: u64) {
    let mut rng = component_rng(seed, "bridge");
    nn::init_linear(store, &mut rng, PROJ, cfg.d_llm, cfg.n * cfg.d_encoder, true);
}

/// [U, d] → [⌈U/n⌉, n·d] on plain tensors.
pub fn stack_frames<T: Real>(embeddings: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if n < 1 {
        return Err(Error::Config("stack_n must be >= 1".into()));
    }
    let (u, d) = embeddings.dims2();
    if u == 0 {
        return Err(Error::Input("no embeddings to stack".into()));
    }
    let m = output_len(u, n);
    let mut data = embeddings.data().to_vec();
    data.resize(m * n * d, T::zero());
    Tensor::new(&[m, n * d], data)
}

/// Inverse of [`stack_frames`] when `U` is a multiple of `n`.
pub fn unstack_frames<T: Real>(stacked: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (m, w) = stacked.dims2();
    if n == 0 || w % n != 0 {
        return Err(Error::shape("unstack", format!("width {w} not divisible by {n}")));
    }
    stacked.reshape(&[m * n, w / n])
}

/// Graph version of [`stack_frames`].
pub fn stack<T: Real>(g: &Graph<'_, T>, embeddings: Var, n: usize) -> Result<Var> {
    if n < 1 {
        return Err(Error::Config("stack_n must be >= 1".into()));
    }
    let (u, d) = g.dims(embeddings);
    if u == 0 {
        return Err(Error::Input("no embeddings to stack".into()));
    }
    let m = output_len(u, n);
    let padded = g.pad_rows(embeddings, m * n)?;
    g.reshape(padded, &[m, n * d])
}

/// Stacked frames [M, n·d] → LM-space embeddings [M, d_llm].
pub fn project<T: Real>(g: &Graph<'_, T>, stacked: Var) -> Result<Var> {
    let w = g.param(&format!("{PROJ}.weight"))?;
    let expect = g.dims(w).1;
    let width = g.dims(stacked).1;
    if width != expect {
        return Err(Error::shape(
            "bridge.project",
            format!("stacked width {width}, projection expects {expect}"),
        ));
    }
    nn::linear(g, stacked, PROJ)
}

/// Stack then project.
pub fn bridge<T: Real>(g: &Graph<'_, T>, embeddings: Var, n: usize) -> Result<Var> {
    project(g, stack(g, embeddings, n)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(u: usize, d: usize) -> Tensor<f64> {
        Tensor::new(&[u, d], (0..u * d).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn six_by_three_gives_two_wide_frames() {
        let s = stack_frames(&seq(6, 512), 3).unwrap();
        assert_eq!(s.shape(), &[2, 1536]);
        assert_eq!(StackConfig { n: 3, d_encoder: 512, d_llm: 4096 }.frame_ms(80), 240);
        // temporal order: frame 0 holds vectors 0,1,2 back to back
        assert_eq!(s.row(0)[512], 513.0);
    }

    #[test]
    fn n_one_is_identity() {
        let x = seq(5, 4);
        assert_eq!(stack_frames(&x, 1).unwrap(), x);
    }

    #[test]
    fn tail_is_zero_padded() {
        let d = 4;
        let s = stack_frames(&seq(7, d), 3).unwrap();
        assert_eq!(s.shape(), &[3, 3 * d]);
        let last = s.row(2);
        assert!(last[..d].iter().all(|&v| v != 0.0));
        assert!(last[d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_unstack_round_trip() {
        let x = seq(12, 5);
        for n in [1, 2, 3, 6, 12] {
            assert_eq!(unstack_frames(&stack_frames(&x, n).unwrap(), n).unwrap(), x);
        }
        assert!(stack_frames(&x, 0).is_err());
    }

    #[test]
    fn projection_shape_and_zero_map() {
        for n in [1, 2, 3, 6, 12] {
            let cfg = StackConfig { n, d_encoder: 4, d_llm: 7 };
            let mut store = ParamStore::<f64>::new();
            init(&mut store, &cfg, 0);
            *store.get_mut("bridge.proj.bias").unwrap() = Tensor::zeros(&[7]);
            let g = Graph::inference(&store);
            let x = g.constant(Tensor::zeros(&[5, 4]));
            let y = g.value(bridge(&g, x, n).unwrap());
            assert_eq!(y.shape(), &[output_len(5, n), 7]);
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn width_mismatch_is_structural_error() {
        let cfg = StackConfig { n: 2, d_encoder: 4, d_llm: 3 };
        let mut store = ParamStore::<f64>::new();
        init(&mut store, &cfg, 0);
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[2, 12]));
        assert!(matches!(project(&g, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn twenty_seconds_at_n12() {
        // 20 s → T = 1998 feature frames
        let t = crate::frontend::num_frames(320_000, 400, 160);
        assert_eq!(t, 1998);
        assert_eq!(embeddings_for_frames(t, 8, 12), 21);
    }
}
