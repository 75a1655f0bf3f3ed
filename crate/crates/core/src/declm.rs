//! Decoder-only causal LM over `[audio embeddings ∥ text embeddings]`.
//!
//! The base LM (`lm.*`) is frozen; LoRA adapters (`lora.*`) sit on the q, k,
//! v and o projections of every layer. Positions run contiguously across the
//! audio/text boundary and `bos` directly follows the audio.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Dropout};
use crate::numcore::kernels::{argmax, dot, gemm_nn, gemm_nt, layer_norm_row, softmax_in_place, swish};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};
use crate::rng::component_rng;
use crate::tokenizer::SpecialIds;

pub const PREFIX: &str = "lm.";
pub const LORA_PREFIX: &str = "lora.";
pub const TOK_EMB: &str = "lm.tok_emb";
pub const ATTN_PROJS: [&str; 4] = ["q", "k", "v", "o"];
/// Greedy decoding stops after this many generated tokens.
pub const MAX_DECODE_LEN: usize = 200;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmPreset {
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "llama-7b")]
    Llama7b,
    #[serde(rename = "bloom-560m")]
    Bloom560m,
    #[serde(rename = "bloom-1b7")]
    Bloom1b7,
    #[serde(rename = "bloom-7b1")]
    Bloom7b1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub specials: SpecialIds,
}

impl LmConfig {
    /// Architecture shape of a preset; vocabulary comes from the tokenizer.
    pub fn preset(preset: LmPreset, vocab_size: usize, specials: SpecialIds) -> Self {
        let (d_llm, num_layers, num_heads, ffn_dim, max_positions) = match preset {
            LmPreset::Tiny => (128, 2, 4, 256, 512),
            LmPreset::Llama7b => (4096, 32, 32, 11008, 2048),
            LmPreset::Bloom560m => (1024, 24, 16, 4096, 2048),
            LmPreset::Bloom1b7 => (2048, 24, 16, 8192, 2048),
            LmPreset::Bloom7b1 => (4096, 30, 32, 16384, 2048),
        };
        LmConfig {
            vocab_size,
            d_llm,
            num_layers,
            num_heads,
            ffn_dim,
            max_positions,
            specials,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_llm.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "lm: d_llm {} not divisible by num_heads {}",
                self.d_llm, self.num_heads
            )));
        }
        let s = self.specials;
        if [s.pad, s.unk, s.bos, s.eos].iter().any(|&id| id >= self.vocab_size) {
            return Err(Error::Config(format!(
                "lm: special ids {s:?} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::Config("lm: max_positions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    /// alpha / R, or 0 when adapters are absent.
    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    /// R · (d_in + d_out) · 4 · layers for square attention projections.
    pub fn trainable_count(&self, lm: &LmConfig) -> usize {
        self.rank * (2 * lm.d_llm) * ATTN_PROJS.len() * lm.num_layers
    }
}

/// Low-rank delta `(alpha/R)·B·A` on top of a frozen `[d_out, d_in]` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// [R, d_in]
    pub a: Tensor<T>,
    /// [d_out, R]
    pub b: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self) -> f64 {
        LoraConfig {
            rank: self.rank(),
            alpha: self.alpha,
        }
        .scale()
    }

    fn check(&self, w: &Tensor<T>) -> Result<()> {
        let (d_out, d_in) = w.dims2();
        let (r, a_in) = self.a.dims2();
        let (b_out, b_r) = self.b.dims2();
        if a_in != d_in || b_out != d_out || b_r != r {
            return Err(Error::shape(
                "lora",
                format!("W {:?}, A {:?}, B {:?}", w.shape(), self.a.shape(), self.b.shape()),
            ));
        }
        Ok(())
    }

    /// Dense `(alpha/R)·B·A`, shape [d_out, d_in].
    pub fn delta(&self) -> Tensor<T> {
        let (r, d_in) = self.a.dims2();
        let d_out = self.b.rows();
        let mut out = vec![T::zero(); d_out * d_in];
        if r > 0 {
            gemm_nn(self.b.data(), self.a.data(), &mut out, d_out, r, d_in);
            let s = T::of(self.scale());
            out.iter_mut().for_each(|v| *v *= s);
        }
        Tensor::from_parts(vec![d_out, d_in], out)
    }
}

/// Rows of `x` [m, d_in] through `W` [d_out, d_in] plus the adapter delta.
pub fn lora_linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, adapter: Option<&LoraAdapter<T>>) -> Result<Tensor<T>> {
    let (m, d_in) = x.dims2();
    let (d_out, w_in) = w.dims2();
    if w_in != d_in {
        return Err(Error::shape("lora_linear", format!("x {:?} vs W {:?}", x.shape(), w.shape())));
    }
    let mut y = vec![T::zero(); m * d_out];
    gemm_nt(x.data(), w.data(), &mut y, m, d_in, d_out);
    if let Some(ad) = adapter.filter(|a| a.rank() > 0) {
        ad.check(w)?;
        let r = ad.rank();
        let mut xa = vec![T::zero(); m * r];
        gemm_nt(x.data(), ad.a.data(), &mut xa, m, d_in, r);
        let mut xab = vec![T::zero(); m * d_out];
        gemm_nt(&xa, ad.b.data(), &mut xab, m, r, d_out);
        let s = T::of(ad.scale());
        for (o, d) in y.iter_mut().zip(xab) {
            *o += s * d;
        }
    }
    Ok(Tensor::from_parts(vec![m, d_out], y))
}

/// `W + (alpha/R)·B·A`. A rank-0 adapter leaves `W` unchanged.
pub fn merge_lora<T: Real>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    if adapter.rank() == 0 {
        warn!("merge_lora called with a rank-0 adapter; weight left unchanged");
        return Ok(w.clone());
    }
    adapter.check(w)?;
    let delta = adapter.delta();
    let data = w.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
    Ok(Tensor::from_parts(w.shape().to_vec(), data))
}

fn proj_name(layer: usize, proj: &str) -> String {
    format!("lm.layers.{layer}.attn.{proj}.weight")
}

fn lora_names(layer: usize, proj: &str) -> (String, String) {
    let p = format!("lora.layers.{layer}.{proj}");
    (format!("{p}.a"), format!("{p}.b"))
}

/// Register the frozen base LM.
pub fn init<T: Real>(store: &mut ParamStore<T>, cfg: &LmConfig, seed: u64) {
    let mut rng = component_rng(seed, "lm");
    let d = cfg.d_llm;
    store.insert(TOK_EMB, nn::normal(&mut rng, &[cfg.vocab_size, d], 0.02), false);
    store.insert("lm.pos_emb", nn::normal(&mut rng, &[cfg.max_positions, d], 0.02), false);
    for l in 0..cfg.num_layers {
        let p = format!("lm.layers.{l}");
        nn::init_layer_norm(store, &format!("{p}.attn_norm"), d);
        for proj in ATTN_PROJS {
            nn::init_linear(store, &mut rng, &format!("{p}.attn.{proj}"), d, d, false);
        }
        nn::init_layer_norm(store, &format!("{p}.ffn_norm"), d);
        nn::init_linear(store, &mut rng, &format!("{p}.ffn.fc1"), cfg.ffn_dim, d, false);
        nn::init_linear(store, &mut rng, &format!("{p}.ffn.fc2"), d, cfg.ffn_dim, false);
    }
    nn::init_layer_norm(store, "lm.final_norm", d);
    nn::init_linear(store, &mut rng, "lm.head", cfg.vocab_size, d, false);
    store.set_trainable_prefix(PREFIX, false);
}

/// Register LoRA adapters (A random, B zero). Rank 0 registers nothing.
pub fn init_lora<T: Real>(store: &mut ParamStore<T>, cfg: &LmConfig, lora: &LoraConfig, seed: u64) {
    store.remove_prefix(LORA_PREFIX);
    if lora.rank == 0 {
        return;
    }
    let mut rng = component_rng(seed, "lora");
    let d = cfg.d_llm;
    let bound = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.num_layers {
        for proj in ATTN_PROJS {
            let (a, b) = lora_names(l, proj);
            store.insert(a, nn::uniform(&mut rng, &[lora.rank, d], bound), true);
            store.insert(b, Tensor::zeros(&[d, lora.rank]), true);
        }
    }
}

/// Adapter for one projection, if present.
pub fn adapter<T: Real>(store: &ParamStore<T>, layer: usize, proj: &str, alpha: f64) -> Result<Option<LoraAdapter<T>>> {
    let (a, b) = lora_names(layer, proj);
    if !store.contains(&a) {
        return Ok(None);
    }
    Ok(Some(LoraAdapter {
        a: store.get(&a)?.clone(),
        b: store.get(&b)?.clone(),
        alpha,
    }))
}

/// Fold every adapter into its base weight and drop `lora.*`.
pub fn merge_all<T: Real>(store: &mut ParamStore<T>, cfg: &LmConfig, lora: &LoraConfig) -> Result<()> {
    for l in 0..cfg.num_layers {
        for proj in ATTN_PROJS {
            if let Some(ad) = adapter(store, l, proj, lora.alpha)? {
                let name = proj_name(l, proj);
                let merged = merge_lora(store.get(&name)?, &ad)?;
                *store.get_mut(&name)? = merged;
            }
        }
    }
    store.remove_prefix(LORA_PREFIX);
    Ok(())
}

fn lora_proj<T: Real>(g: &Graph<'_, T>, x: Var, layer: usize, proj: &str, scale: f64) -> Result<Var> {
    let y = g.matmul_nt(x, g.param(&proj_name(layer, proj))?)?;
    let (a, b) = lora_names(layer, proj);
    if !g.has_param(&a) {
        return Ok(y);
    }
    let xa = g.matmul_nt(x, g.param(&a)?)?;
    let xab = g.matmul_nt(xa, g.param(&b)?)?;
    g.add(y, g.scale(xab, T::of(scale))?)
}

/// Logits [M + |ids|, vocab] for audio rows followed by text tokens.
pub fn forward_mixed<T: Real>(
    g: &Graph<'_, T>,
    cfg: &LmConfig,
    lora: &LoraConfig,
    audio: Option<Var>,
    ids: &[usize],
    drop: Option<&Dropout>,
) -> Result<Var> {
    let m = match audio {
        Some(a) => {
            let (m, w) = g.dims(a);
            if w != cfg.d_llm {
                return Err(Error::shape("forward_mixed", format!("audio width {w} vs d_llm {}", cfg.d_llm)));
            }
            m
        }
        None => 0,
    };
    let n = m + ids.len();
    if n > cfg.max_positions {
        return Err(Error::SequenceOverflow {
            audio: m,
            text: ids.len(),
            max: cfg.max_positions,
        });
    }
    if n == 0 {
        return Err(Error::Input("empty mixed sequence".into()));
    }
    let mut parts = Vec::with_capacity(2);
    if let Some(a) = audio.filter(|_| m > 0) {
        parts.push(a);
    }
    if !ids.is_empty() {
        parts.push(g.embedding(g.param(TOK_EMB)?, ids)?);
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    let mut x = g.add(x, g.slice_rows(g.param("lm.pos_emb")?, 0, n)?)?;

    let mask = nn::causal_mask(n);
    let scale = lora.scale();
    for l in 0..cfg.num_layers {
        let p = format!("lm.layers.{l}");
        let h = nn::layer_norm(g, x, &format!("{p}.attn_norm"))?;
        let q = lora_proj(g, h, l, "q", scale)?;
        let k = lora_proj(g, h, l, "k", scale)?;
        let v = lora_proj(g, h, l, "v", scale)?;
        let a = nn::attention(g, q, k, v, cfg.num_heads, Some(&mask))?;
        let a = lora_proj(g, a, l, "o", scale)?;
        x = g.add(x, nn::dropout(g, a, drop)?)?;

        let h = nn::layer_norm(g, x, &format!("{p}.ffn_norm"))?;
        let h = g.swish(nn::linear(g, h, &format!("{p}.ffn.fc1"))?)?;
        let h = nn::linear(g, h, &format!("{p}.ffn.fc2"))?;
        x = g.add(x, nn::dropout(g, h, drop)?)?;
    }
    let x = nn::layer_norm(g, x, "lm.final_norm")?;
    g.matmul_nt(x, g.param("lm.head.weight")?)
}

/// Mean next-token cross-entropy over rows `start..start + targets.len()`.
pub fn text_loss<T: Real>(g: &Graph<'_, T>, logits: Var, start: usize, targets: &[usize]) -> Result<Var> {
    let (rows, vocab) = g.dims(logits);
    if targets.is_empty() || start + targets.len() > rows {
        return Err(Error::shape(
            "text_loss",
            format!("{} targets from row {start} of {rows}", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Input(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let lp = g.log_softmax(g.slice_rows(logits, start, targets.len())?)?;
    let flat: Vec<usize> = targets.iter().enumerate().map(|(r, &t)| r * vocab + t).collect();
    g.scale(g.mean(g.pick(lp, &flat)?)?, -T::one())
}

/// Inputs `[bos, t1..tk]` and targets `[t1..tk, eos]` for a transcript.
pub fn teacher_forcing(ids: &[usize], specials: SpecialIds) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(specials.bos);
    input.extend_from_slice(ids);
    let mut target = ids.to_vec();
    target.push(specials.eos);
    (input, target)
}

/// Mixed-sequence training loss: audio prefix, teacher-forced transcript.
/// `inputs` may differ from the transcript (masking); targets never do.
pub fn mixed_loss<T: Real>(
    g: &Graph<'_, T>,
    cfg: &LmConfig,
    lora: &LoraConfig,
    audio: Option<Var>,
    inputs: &[usize],
    targets: &[usize],
    drop: Option<&Dropout>,
) -> Result<Var> {
    if inputs.len() != targets.len() {
        return Err(Error::shape(
            "mixed_loss",
            format!("{} inputs vs {} targets", inputs.len(), targets.len()),
        ));
    }
    let m = audio.map_or(0, |a| g.dims(a).0);
    let logits = forward_mixed(g, cfg, lora, audio, inputs, drop)?;
    text_loss(g, logits, m, targets)
}

// ---- incremental inference ----

struct Proj<T> {
    w: Tensor<T>,
}

impl<T: Real> Proj<T> {
    fn apply(&self, x: &[T]) -> Vec<T> {
        let (out, inp) = self.w.dims2();
        let mut y = vec![T::zero(); out];
        gemm_nt(x, self.w.data(), &mut y, 1, inp, out);
        y
    }
}

struct Layer<T> {
    attn_norm: (Tensor<T>, Tensor<T>),
    q: Proj<T>,
    k: Proj<T>,
    v: Proj<T>,
    o: Proj<T>,
    ffn_norm: (Tensor<T>, Tensor<T>),
    fc1: Proj<T>,
    fc2: Proj<T>,
    keys: Vec<T>,
    values: Vec<T>,
}

/// Single-row forward with a per-layer key/value cache. Adapters are merged
/// into the projections up front.
pub struct IncrementalLm<T> {
    cfg: LmConfig,
    tok_emb: Tensor<T>,
    pos_emb: Tensor<T>,
    layers: Vec<Layer<T>>,
    final_norm: (Tensor<T>, Tensor<T>),
    head: Proj<T>,
    pos: usize,
}

impl<T: Real> IncrementalLm<T> {
    pub fn new(store: &ParamStore<T>, cfg: &LmConfig, lora: &LoraConfig) -> Result<Self> {
        let norm = |p: &str| -> Result<(Tensor<T>, Tensor<T>)> {
            Ok((store.get(&format!("{p}.gamma"))?.clone(), store.get(&format!("{p}.beta"))?.clone()))
        };
        let plain = |name: &str| -> Result<Proj<T>> {
            Ok(Proj {
                w: store.get(name)?.clone(),
            })
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = format!("lm.layers.{l}");
            let attn = |proj: &str| -> Result<Proj<T>> {
                let w = store.get(&proj_name(l, proj))?;
                let w = match adapter(store, l, proj, lora.alpha)? {
                    Some(ad) if ad.rank() > 0 => merge_lora(w, &ad)?,
                    _ => w.clone(),
                };
                Ok(Proj { w })
            };
            layers.push(Layer {
                attn_norm: norm(&format!("{p}.attn_norm"))?,
                q: attn("q")?,
                k: attn("k")?,
                v: attn("v")?,
                o: attn("o")?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
                fc1: plain(&format!("{p}.ffn.fc1.weight"))?,
                fc2: plain(&format!("{p}.ffn.fc2.weight"))?,
                keys: Vec::new(),
                values: Vec::new(),
            });
        }
        Ok(IncrementalLm {
            cfg: cfg.clone(),
            tok_emb: store.get(TOK_EMB)?.clone(),
            pos_emb: store.get("lm.pos_emb")?.clone(),
            layers,
            final_norm: norm("lm.final_norm")?,
            head: plain("lm.head.weight")?,
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn reset(&mut self) {
        self.pos = 0;
        for l in &mut self.layers {
            l.keys.clear();
            l.values.clear();
        }
    }

    pub fn step_token(&mut self, id: usize) -> Result<Vec<T>> {
        if id >= self.cfg.vocab_size {
            return Err(Error::Input(format!("token id {id} outside vocabulary")));
        }
        let row = self.tok_emb.row(id).to_vec();
        self.step_embedding(&row)
    }

    /// Append one input row at the next position; returns its logits.
    pub fn step_embedding(&mut self, input: &[T]) -> Result<Vec<T>> {
        let d = self.cfg.d_llm;
        if input.len() != d {
            return Err(Error::shape("step_embedding", format!("{} vs d_llm {d}", input.len())));
        }
        if self.pos >= self.cfg.max_positions {
            return Err(Error::SequenceOverflow {
                audio: self.pos,
                text: 1,
                max: self.cfg.max_positions,
            });
        }
        let eps = T::of(LN_EPS);
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let att_scale = T::of(1.0 / (dh as f64).sqrt());
        let mut x: Vec<T> = input.iter().zip(self.pos_emb.row(self.pos)).map(|(&a, &b)| a + b).collect();
        let mut h = vec![T::zero(); d];
        let n = self.pos + 1;
        for layer in &mut self.layers {
            layer_norm_row(&x, layer.attn_norm.0.data(), layer.attn_norm.1.data(), &mut h, eps);
            let q = layer.q.apply(&h);
            layer.keys.extend(layer.k.apply(&h));
            layer.values.extend(layer.v.apply(&h));
            let mut ctx = vec![T::zero(); d];
            let mut scores = vec![T::zero(); n];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[cols.clone()], &layer.keys[j * d + cols.start..j * d + cols.end]) * att_scale;
                }
                softmax_in_place(&mut scores);
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &layer.values[j * d + cols.start..j * d + cols.end];
                    for (c, &v) in ctx[cols.clone()].iter_mut().zip(vj) {
                        *c += p * v;
                    }
                }
            }
            for (xi, oi) in x.iter_mut().zip(layer.o.apply(&ctx)) {
                *xi += oi;
            }
            layer_norm_row(&x, layer.ffn_norm.0.data(), layer.ffn_norm.1.data(), &mut h, eps);
            let f: Vec<T> = layer.fc1.apply(&h).into_iter().map(swish).collect();
            for (xi, fi) in x.iter_mut().zip(layer.fc2.apply(&f)) {
                *xi += fi;
            }
        }
        layer_norm_row(&x, self.final_norm.0.data(), self.final_norm.1.data(), &mut h, eps);
        self.pos += 1;
        Ok(self.head.apply(&h))
    }
}

/// Greedy decode after an audio prefix: bos, then argmax until eos or
/// `max_len` generated tokens (capped at [`MAX_DECODE_LEN`]). The returned ids
/// exclude bos and eos.
pub fn greedy_decode<T: Real>(
    store: &ParamStore<T>,
    cfg: &LmConfig,
    lora: &LoraConfig,
    audio: &Tensor<T>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut lm = IncrementalLm::new(store, cfg, lora)?;
    for r in 0..audio.rows() {
        lm.step_embedding(audio.row(r))?;
    }
    let max_len = max_len.min(MAX_DECODE_LEN);
    let mut out = Vec::new();
    let mut logits = lm.step_token(cfg.specials.bos)?;
    while out.len() < max_len {
        let next = argmax(&logits);
        if next == cfg.specials.eos {
            break;
        }
        out.push(next);
        if out.len() == max_len || lm.position() >= cfg.max_positions {
            break;
        }
        logits = lm.step_token(next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SPECIALS;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 9,
            d_llm: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 12,
            max_positions: 32,
            specials: SPECIALS,
        }
    }

    fn store(lora: &LoraConfig) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init(&mut s, &cfg(), 11);
        init_lora(&mut s, &cfg(), lora, 12);
        s
    }

    fn randomize_b(s: &mut ParamStore<f64>, seed: u64) {
        let mut rng = component_rng(seed, "b");
        for name in s.names().filter(|n| n.ends_with(".b")).cloned().collect::<Vec<_>>() {
            let shape = s.get(&name).unwrap().shape().to_vec();
            *s.get_mut(&name).unwrap() = nn::normal(&mut rng, &shape, 0.3);
        }
    }

    fn logits(s: &ParamStore<f64>, lora: &LoraConfig, audio: Option<&Tensor<f64>>, ids: &[usize]) -> Tensor<f64> {
        let g = Graph::inference(s);
        let a = audio.map(|t| g.constant(t.clone()));
        g.value(forward_mixed(&g, &cfg(), lora, a, ids, None).unwrap())
    }

    #[test]
    fn lora_linear_matches_dense_oracle() {
        let mut rng = component_rng(1, "t");
        let w: Tensor<f64> = nn::normal(&mut rng, &[5, 4], 1.0);
        let ad = LoraAdapter {
            a: nn::normal(&mut rng, &[3, 4], 1.0),
            b: nn::normal(&mut rng, &[5, 3], 1.0),
            alpha: 6.0,
        };
        let x: Tensor<f64> = nn::normal(&mut rng, &[7, 4], 1.0);
        let y = lora_linear(&x, &w, Some(&ad)).unwrap();
        // explicit (W + 2·B·A) x per element
        for i in 0..7 {
            for o in 0..5 {
                let mut acc = 0.0;
                for c in 0..4 {
                    let mut ba = 0.0;
                    for r in 0..3 {
                        ba += ad.b.data()[o * 3 + r] * ad.a.data()[r * 4 + c];
                    }
                    acc += (w.data()[o * 4 + c] + 2.0 * ba) * x.data()[i * 4 + c];
                }
                assert!((y.data()[i * 5 + o] - acc).abs() < 1e-12);
            }
        }
        let zero_b = LoraAdapter {
            b: Tensor::zeros(&[5, 3]),
            ..ad.clone()
        };
        assert_eq!(lora_linear(&x, &w, Some(&zero_b)).unwrap(), lora_linear(&x, &w, None).unwrap());
        assert_eq!(merge_lora(&w, &zero_b).unwrap(), w);
        let merged = merge_lora(&w, &ad).unwrap();
        assert!(lora_linear(&x, &merged, None).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn rank_zero_is_frozen_base() {
        let lora = LoraConfig { rank: 0, alpha: 16.0 };
        let s = store(&lora);
        assert_eq!(s.count(LORA_PREFIX, false), 0);
        assert_eq!(s.count("", true), 0);
        assert_eq!(lora.trainable_count(&cfg()), 0);
        let ad = LoraAdapter::<f64> {
            a: Tensor::zeros(&[0, 8]),
            b: Tensor::zeros(&[8, 0]),
            alpha: 16.0,
        };
        let w = s.get(&proj_name(0, "q")).unwrap();
        assert_eq!(&merge_lora(w, &ad).unwrap(), w);
    }

    #[test]
    fn trainable_count_formula() {
        let lora = LoraConfig::default();
        let s = store(&lora);
        assert_eq!(s.count("", true), lora.trainable_count(&cfg()));
        assert_eq!(lora.trainable_count(&cfg()), 8 * 16 * 4 * 2);
    }

    #[test]
    fn zero_init_adapter_is_bit_identical() {
        let lora = LoraConfig::default();
        let with = store(&lora);
        let mut without = with.clone();
        without.remove_prefix(LORA_PREFIX);
        let audio = nn::normal(&mut component_rng(2, "a"), &[3, 8], 1.0);
        let ids = [2, 5, 6, 7];
        assert_eq!(logits(&with, &lora, Some(&audio), &ids), logits(&without, &lora, Some(&audio), &ids));
    }

    #[test]
    fn causality() {
        let lora = LoraConfig::default();
        let mut s = store(&lora);
        randomize_b(&mut s, 3);
        let audio = nn::normal(&mut component_rng(4, "a"), &[2, 8], 1.0);
        let a = logits(&s, &lora, Some(&audio), &[2, 4, 5, 6, 7]);
        let b = logits(&s, &lora, Some(&audio), &[2, 4, 7, 6, 5]);
        assert_eq!(&a.data()[..4 * 9], &b.data()[..4 * 9]);
        assert_ne!(a.data()[4 * 9..], b.data()[4 * 9..]);
        // text-only forward is the plain LM
        let t = logits(&s, &lora, None, &[2, 4]);
        assert_eq!(t.shape(), &[2, 9]);
    }

    #[test]
    fn overflow_names_lengths() {
        let lora = LoraConfig::default();
        let s = store(&lora);
        let audio = Tensor::zeros(&[30, 8]);
        let g = Graph::inference(&s);
        let a = g.constant(audio);
        let err = forward_mixed(&g, &cfg(), &lora, Some(a), &[2, 4, 5], None).unwrap_err();
        assert!(matches!(err, Error::SequenceOverflow { audio: 30, text: 3, max: 32 }));
        assert!(err.to_string().contains("30"));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let lora = LoraConfig::default();
        let mut s = store(&lora);
        randomize_b(&mut s, 5);
        let audio = nn::normal(&mut component_rng(6, "a"), &[3, 8], 1.0);
        let ids = [2, 8, 4, 5];
        let full = logits(&s, &lora, Some(&audio), &ids);
        let mut lm = IncrementalLm::new(&s, &cfg(), &lora).unwrap();
        let mut rows = Vec::new();
        for r in 0..3 {
            rows.extend(lm.step_embedding(audio.row(r)).unwrap());
        }
        for &id in &ids {
            rows.extend(lm.step_token(id).unwrap());
        }
        let inc = Tensor::new(&[7, 9], rows).unwrap();
        assert!(inc.max_abs_diff(&full) < 1e-10, "{}", inc.max_abs_diff(&full));
    }

    #[test]
    fn greedy_decode_contract() {
        let lora = LoraConfig::default();
        let mut s = store(&lora);
        randomize_b(&mut s, 7);
        let audio = nn::normal(&mut component_rng(8, "a"), &[2, 8], 1.0);
        let a = greedy_decode(&s, &cfg(), &lora, &audio, 200).unwrap();
        let b = greedy_decode(&s, &cfg(), &lora, &audio, 200).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 30 && !a.contains(&SPECIALS.eos));
        let short = greedy_decode(&s, &cfg(), &lora, &audio, 1).unwrap();
        assert!(short.len() <= 1);

        // a head that always prefers eos yields an empty transcript
        let mut head = Tensor::zeros(&[9, 8]);
        let mut bias_s = s.clone();
        let mut nf = bias_s.get("lm.final_norm.beta").unwrap().clone();
        nf.data_mut().iter_mut().for_each(|v| *v = 1.0);
        *bias_s.get_mut("lm.final_norm.beta").unwrap() = nf;
        *bias_s.get_mut("lm.final_norm.gamma").unwrap() = Tensor::zeros(&[8]);
        head.data_mut()[SPECIALS.eos * 8..SPECIALS.eos * 8 + 8].iter_mut().for_each(|v| *v = 1.0);
        *bias_s.get_mut("lm.head.weight").unwrap() = head;
        assert!(greedy_decode(&bias_s, &cfg(), &lora, &audio, 200).unwrap().is_empty());
    }

    #[test]
    fn merge_all_drops_adapters_and_preserves_outputs() {
        let lora = LoraConfig::default();
        let mut s = store(&lora);
        randomize_b(&mut s, 9);
        let audio = nn::normal(&mut component_rng(10, "a"), &[2, 8], 1.0);
        let before = logits(&s, &lora, Some(&audio), &[2, 4, 5]);
        merge_all(&mut s, &cfg(), &lora).unwrap();
        assert_eq!(s.count(LORA_PREFIX, false), 0);
        let after = logits(&s, &lora, Some(&audio), &[2, 4, 5]);
        assert!(before.max_abs_diff(&after) < 1e-10);
    }

    #[test]
    fn teacher_forcing_shift() {
        let (i, t) = teacher_forcing(&[5, 6], SPECIALS);
        assert_eq!(i, vec![2, 5, 6]);
        assert_eq!(t, vec![5, 6, 3]);
    }
}
