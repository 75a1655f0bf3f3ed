//! Conformer audio encoder: stride-8 convolutional subsampler, projection to
//! model width, learned positions, non-macaron conformer blocks and a
//! detachable CTC head.
//!
//! Block layout (pre-norm, residual around each sub-module):
//! self-attention → depthwise convolution module → single feed-forward net.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Dropout};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng::component_rng;

pub const PREFIX: &str = "encoder.";
pub const CTC_HEAD: &str = "encoder.ctc_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub num_heads: usize,
    pub subsample_stride: usize,
    pub subsample_channels: usize,
    /// Longest encoder output the learned position table covers.
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl EncoderConfig {
    /// 18 layers, width 512, FFN 2048, kernel 11, 8 heads.
    pub fn paper() -> Self {
        EncoderConfig {
            num_layers: 18,
            d_model: 512,
            ffn_dim: 2048,
            conv_kernel: 11,
            num_heads: 8,
            subsample_stride: 8,
            subsample_channels: 512,
            max_frames: 256,
        }
    }

    pub fn tiny() -> Self {
        EncoderConfig {
            num_layers: 2,
            d_model: 64,
            ffn_dim: 128,
            conv_kernel: 11,
            num_heads: 4,
            subsample_stride: 8,
            subsample_channels: 64,
            max_frames: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder: d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("encoder: conv_kernel {} must be odd", self.conv_kernel)));
        }
        if !self.subsample_stride.is_power_of_two() || self.subsample_stride < 2 {
            return Err(Error::Config(format!(
                "encoder: subsample_stride {} must be a power of two >= 2",
                self.subsample_stride
            )));
        }
        Ok(())
    }

    fn num_convs(&self) -> usize {
        self.subsample_stride.trailing_zeros() as usize
    }

    /// Frame duration after subsampling, for a 10 ms input hop.
    pub fn frame_ms(&self) -> usize {
        10 * self.subsample_stride
    }
}

/// U = ⌈T / stride⌉
pub fn output_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Register all encoder parameters; `ctc_vocab` adds the CTC head with `ctc_vocab + 1` outputs.
pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &EncoderConfig, n_mels: usize, ctc_vocab: Option<usize>, seed: u64) {
    let mut rng = component_rng(seed, "encoder");
    let c = cfg.subsample_channels;
    for i in 0..cfg.num_convs() {
        let cin = if i == 0 { n_mels } else { c };
        let bound = 1.0 / ((cin * 3) as f64).sqrt();
        store.insert(format!("encoder.sub.conv{i}.weight"), nn::uniform(&mut rng, &[c, cin, 3], bound), true);
        store.insert(format!("encoder.sub.conv{i}.bias"), nn::uniform(&mut rng, &[c], bound), true);
    }
    let d = cfg.d_model;
    nn::init_linear(store, &mut rng, "encoder.sub.proj", d, c, true);
    store.insert("encoder.pos", nn::normal(&mut rng, &[cfg.max_frames, d], 0.02), true);
    for l in 0..cfg.num_layers {
        let p = format!("encoder.layers.{l}");
        nn::init_layer_norm(store, &format!("{p}.attn_norm"), d);
        for proj in ["q", "k", "v", "o"] {
            nn::init_linear(store, &mut rng, &format!("{p}.attn.{proj}"), d, d, true);
        }
        nn::init_layer_norm(store, &format!("{p}.conv_norm"), d);
        nn::init_linear(store, &mut rng, &format!("{p}.conv.pw1"), 2 * d, d, true);
        let k = cfg.conv_kernel;
        let bound = 1.0 / (k as f64).sqrt();
        store.insert(format!("{p}.conv.dw.weight"), nn::uniform(&mut rng, &[d, k], bound), true);
        store.insert(format!("{p}.conv.dw.bias"), nn::uniform(&mut rng, &[d], bound), true);
        nn::init_layer_norm(store, &format!("{p}.conv.norm"), d);
        nn::init_linear(store, &mut rng, &format!("{p}.conv.pw2"), d, d, true);
        nn::init_layer_norm(store, &format!("{p}.ffn_norm"), d);
        nn::init_linear(store, &mut rng, &format!("{p}.ffn.fc1"), cfg.ffn_dim, d, true);
        nn::init_linear(store, &mut rng, &format!("{p}.ffn.fc2"), d, cfg.ffn_dim, true);
    }
    if let Some(v) = ctc_vocab {
        nn::init_linear(store, &mut rng, CTC_HEAD, v + 1, d, true);
    }
}

/// Names of every residual-branch output projection (attention out, conv pw2, FFN fc2).
pub fn residual_output_params(cfg: &EncoderConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.num_layers {
        for sub in ["attn.o", "conv.pw2", "ffn.fc2"] {
            names.push(format!("encoder.layers.{l}.{sub}.weight"));
            names.push(format!("encoder.layers.{l}.{sub}.bias"));
        }
    }
    names
}

/// Features [T, n_mels] → [⌈T/stride⌉, d_model] including learned positions.
pub fn subsample<T: Real>(g: &Graph<'_, T>, cfg: &EncoderConfig, features: Var) -> Result<Var> {
    let (t, _) = g.dims(features);
    if t == 0 {
        return Err(Error::Input("empty feature matrix".into()));
    }
    let u = output_len(t, cfg.subsample_stride);
    if u > cfg.max_frames {
        return Err(Error::Input(format!(
            "{u} encoder frames exceed max_frames {}",
            cfg.max_frames
        )));
    }
    let mut x = g.pad_rows(features, u * cfg.subsample_stride)?;
    for i in 0..cfg.num_convs() {
        let w = g.param(&format!("encoder.sub.conv{i}.weight"))?;
        let b = g.param(&format!("encoder.sub.conv{i}.bias"))?;
        x = g.swish(g.add_row(g.conv1d(x, w, 2, 1)?, b)?)?;
    }
    let x = nn::linear(g, x, "encoder.sub.proj")?;
    let pos = g.slice_rows(g.param("encoder.pos")?, 0, u)?;
    g.add(x, pos)
}

/// One non-macaron conformer block; shape preserved.
pub fn conformer_block<T: Real>(
    g: &Graph<'_, T>,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    drop: Option<&Dropout>,
) -> Result<Var> {
    let p = format!("encoder.layers.{layer}");

    let h = nn::layer_norm(g, x, &format!("{p}.attn_norm"))?;
    let q = nn::linear(g, h, &format!("{p}.attn.q"))?;
    let k = nn::linear(g, h, &format!("{p}.attn.k"))?;
    let v = nn::linear(g, h, &format!("{p}.attn.v"))?;
    let a = nn::attention(g, q, k, v, cfg.num_heads, None)?;
    let a = nn::linear(g, a, &format!("{p}.attn.o"))?;
    let x = g.add(x, nn::dropout(g, a, drop)?)?;

    let h = nn::layer_norm(g, x, &format!("{p}.conv_norm"))?;
    let h = g.glu(nn::linear(g, h, &format!("{p}.conv.pw1"))?)?;
    let dw = g.depthwise_conv1d(h, g.param(&format!("{p}.conv.dw.weight"))?)?;
    let h = g.add_row(dw, g.param(&format!("{p}.conv.dw.bias"))?)?;
    let h = g.swish(nn::layer_norm(g, h, &format!("{p}.conv.norm"))?)?;
    let h = nn::linear(g, h, &format!("{p}.conv.pw2"))?;
    let x = g.add(x, nn::dropout(g, h, drop)?)?;

    let h = nn::layer_norm(g, x, &format!("{p}.ffn_norm"))?;
    let h = g.swish(nn::linear(g, h, &format!("{p}.ffn.fc1"))?)?;
    let h = nn::linear(g, h, &format!("{p}.ffn.fc2"))?;
    g.add(x, nn::dropout(g, h, drop)?)
}

/// Features → audio embeddings [U, d_model].
pub fn encode<T: Real>(g: &Graph<'_, T>, cfg: &EncoderConfig, features: Var, drop: Option<&Dropout>) -> Result<Var> {
    let mut x = subsample(g, cfg, features)?;
    for l in 0..cfg.num_layers {
        x = conformer_block(g, cfg, l, x, drop)?;
    }
    Ok(x)
}

/// CTC log-probabilities [U, ctc_vocab + 1] from the detachable head.
pub fn ctc_log_probs<T: Real>(g: &Graph<'_, T>, embeddings: Var) -> Result<Var> {
    g.log_softmax(ctc_logits(g, embeddings)?)
}

pub fn ctc_logits<T: Real>(g: &Graph<'_, T>, embeddings: Var) -> Result<Var> {
    if !g.has_param(&format!("{CTC_HEAD}.weight")) {
        return Err(Error::Checkpoint("CTC head was discarded after pretraining".into()));
    }
    nn::linear(g, embeddings, CTC_HEAD)
}

/// Inference: embeddings and (when the head is present) CTC logits.
pub fn encode_tensor<T: Real>(
    params: &ParamStore<T>,
    cfg: &EncoderConfig,
    features: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let g = Graph::inference(params);
    let x = g.constant(features.clone());
    let emb = encode(&g, cfg, x, None)?;
    let logits = if g.has_param(&format!("{CTC_HEAD}.weight")) {
        Some(g.value(ctc_logits(&g, emb)?))
    } else {
        None
    };
    Ok((g.value(emb), logits))
}
