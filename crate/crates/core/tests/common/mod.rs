#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use speechlm::bridge::{self, StackConfig};
use speechlm::config::RunConfig;
use speechlm::ctc;
use speechlm::declm::{self, LmConfig, LoraConfig};
use speechlm::encoder::{self, EncoderConfig};
use speechlm::nn;
use speechlm::numcore::{grad_check, grad_check_params, GradCheckReport, Graph, ParamStore, Tensor, Var, DEFAULT_STEP};
use speechlm::rng::component_rng;
use speechlm::tokenizer::SPECIALS;
use speechlm::Result;

pub fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    nn::normal(&mut component_rng(seed, "test"), shape, 1.0)
}

/// Random-weighted sum, so every output element gets a distinct upstream gradient.
pub fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = g.value(y).len();
    let w = randn(seed + 1000, &[n]).into_vec();
    g.sum(g.mul_const(y, Arc::new(w))?)
}

type Case = Box<dyn Fn() -> Result<GradCheckReport>>;

fn tensor_case(f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var> + 'static, inputs: Vec<Tensor<f64>>) -> Case {
    Box::new(move || grad_check(&f, &inputs, DEFAULT_STEP))
}

fn log_probs(seed: u64, t: usize, v: usize) -> Tensor<f64> {
    let mut x = randn(seed, &[t, v]);
    for r in x.data_mut().chunks_mut(v) {
        speechlm::numcore::kernels::log_softmax_in_place(r);
    }
    x
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        d_model: 8,
        ffn_dim: 12,
        conv_kernel: 3,
        num_heads: 2,
        subsample_stride: 8,
        subsample_channels: 4,
        max_frames: 16,
    }
}

pub fn tiny_lm(vocab: usize) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        d_llm: 8,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 12,
        max_positions: 16,
        specials: SPECIALS,
    }
}

/// Encoder + bridge + LM with non-zero adapters, all in f64.
pub fn tiny_joint_store(n_mels: usize, vocab: usize) -> (ParamStore<f64>, EncoderConfig, LmConfig, LoraConfig) {
    let enc = tiny_encoder();
    let lm = tiny_lm(vocab);
    let lora = LoraConfig { rank: 2, alpha: 4.0 };
    let mut s = ParamStore::new();
    encoder::init(&mut s, &enc, n_mels, None, 5);
    bridge::init(
        &mut s,
        &StackConfig {
            n: 2,
            d_encoder: enc.d_model,
            d_llm: lm.d_llm,
        },
        5,
    );
    declm::init(&mut s, &lm, 5);
    declm::init_lora(&mut s, &lm, &lora, 5);
    let mut rng = component_rng(6, "b");
    for name in s.names().filter(|n| n.ends_with(".b")).cloned().collect::<Vec<_>>() {
        let shape = s.get(&name).unwrap().shape().to_vec();
        *s.get_mut(&name).unwrap() = nn::normal(&mut rng, &shape, 0.5);
    }
    (s, enc, lm, lora)
}

/// Every differentiable primitive plus the composite models, as named checks.
pub fn gradient_cases() -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    cases.push(("matmul", tensor_case(|g, v| probe(g, g.matmul(v[0], v[1])?, 1), vec![randn(1, &[3, 4]), randn(2, &[4, 5])])));
    cases.push(("matmul_nt", tensor_case(|g, v| probe(g, g.matmul_nt(v[0], v[1])?, 2), vec![randn(3, &[3, 4]), randn(4, &[5, 4])])));
    cases.push((
        "linear",
        tensor_case(|g, v| probe(g, g.linear(v[0], v[1], Some(v[2]))?, 3), vec![randn(5, &[3, 4]), randn(6, &[2, 4]), randn(7, &[2])]),
    ));
    cases.push(("add", tensor_case(|g, v| probe(g, g.add(v[0], v[1])?, 4), vec![randn(8, &[2, 3]), randn(9, &[2, 3])])));
    cases.push(("sub", tensor_case(|g, v| probe(g, g.sub(v[0], v[1])?, 5), vec![randn(10, &[2, 3]), randn(11, &[2, 3])])));
    cases.push(("mul", tensor_case(|g, v| probe(g, g.mul(v[0], v[1])?, 6), vec![randn(12, &[2, 3]), randn(13, &[2, 3])])));
    cases.push(("add_row", tensor_case(|g, v| probe(g, g.add_row(v[0], v[1])?, 7), vec![randn(14, &[3, 4]), randn(15, &[4])])));
    cases.push(("scale", tensor_case(|g, v| probe(g, g.scale(v[0], -1.7)?, 8), vec![randn(16, &[2, 3])])));
    cases.push((
        "mul_const",
        tensor_case(|g, v| probe(g, g.mul_const(v[0], Arc::new(vec![0.0, 2.0, -1.0, 0.5, 1.0, 3.0]))?, 9), vec![randn(17, &[2, 3])]),
    ));
    cases.push(("swish", tensor_case(|g, v| probe(g, g.swish(v[0])?, 10), vec![randn(18, &[3, 4])])));
    cases.push(("sigmoid", tensor_case(|g, v| probe(g, g.sigmoid(v[0])?, 11), vec![randn(19, &[3, 4])])));
    cases.push(("glu", tensor_case(|g, v| probe(g, g.glu(v[0])?, 12), vec![randn(20, &[3, 6])])));
    cases.push((
        "layer_norm",
        tensor_case(|g, v| probe(g, g.layer_norm(v[0], v[1], v[2])?, 13), vec![randn(21, &[3, 5]), randn(22, &[5]), randn(23, &[5])]),
    ));
    cases.push(("softmax", tensor_case(|g, v| probe(g, g.softmax(v[0])?, 14), vec![randn(24, &[3, 5])])));
    cases.push((
        "masked_softmax",
        tensor_case(|g, v| probe(g, g.masked_softmax(v[0], &nn::causal_mask(4))?, 15), vec![randn(25, &[4, 4])]),
    ));
    cases.push(("log_softmax", tensor_case(|g, v| probe(g, g.log_softmax(v[0])?, 16), vec![randn(26, &[3, 5])])));
    cases.push(("embedding", tensor_case(|g, v| probe(g, g.embedding(v[0], &[2, 0, 2, 4])?, 17), vec![randn(27, &[5, 3])])));
    cases.push((
        "conv1d_stride2_pad1",
        tensor_case(|g, v| probe(g, g.conv1d(v[0], v[1], 2, 1)?, 18), vec![randn(28, &[9, 3]), randn(29, &[4, 3, 3])]),
    ));
    cases.push((
        "conv1d_stride1",
        tensor_case(|g, v| probe(g, g.conv1d(v[0], v[1], 1, 0)?, 19), vec![randn(30, &[6, 2]), randn(31, &[3, 2, 3])]),
    ));
    cases.push((
        "depthwise_conv1d",
        tensor_case(|g, v| probe(g, g.depthwise_conv1d(v[0], v[1])?, 20), vec![randn(32, &[7, 3]), randn(33, &[3, 5])]),
    ));
    cases.push((
        "concat_rows",
        tensor_case(|g, v| probe(g, g.concat_rows(&[v[0], v[1]])?, 21), vec![randn(34, &[2, 3]), randn(35, &[3, 3])]),
    ));
    cases.push((
        "concat_cols",
        tensor_case(|g, v| probe(g, g.concat_cols(&[v[0], v[1]])?, 22), vec![randn(36, &[3, 2]), randn(37, &[3, 4])]),
    ));
    cases.push(("slice_rows", tensor_case(|g, v| probe(g, g.slice_rows(v[0], 1, 2)?, 23), vec![randn(38, &[4, 3])])));
    cases.push(("slice_cols", tensor_case(|g, v| probe(g, g.slice_cols(v[0], 1, 2)?, 24), vec![randn(39, &[3, 4])])));
    cases.push(("pad_rows", tensor_case(|g, v| probe(g, g.pad_rows(v[0], 5)?, 25), vec![randn(40, &[3, 2])])));
    cases.push(("reshape", tensor_case(|g, v| probe(g, g.reshape(v[0], &[2, 6])?, 26), vec![randn(41, &[4, 3])])));
    cases.push(("pick", tensor_case(|g, v| probe(g, g.pick(v[0], &[0, 5, 5, 7])?, 27), vec![randn(42, &[2, 4])])));
    cases.push(("sum", tensor_case(|g, v| g.sum(g.mul(v[0], v[0])?), vec![randn(43, &[2, 3])])));
    cases.push(("mean", tensor_case(|g, v| g.mean(g.mul(v[0], v[0])?), vec![randn(44, &[2, 3])])));
    cases.push((
        "attention_causal",
        tensor_case(
            |g, v| probe(g, nn::attention(g, v[0], v[1], v[2], 2, Some(&nn::causal_mask(3)))?, 28),
            vec![randn(45, &[3, 4]), randn(46, &[3, 4]), randn(47, &[3, 4])],
        ),
    ));
    cases.push((
        "ctc_loss",
        tensor_case(
            |g, v| ctc::ctc_graph_loss(g, g.log_softmax(v[0])?, &[1, 2, 2]),
            vec![randn(48, &[7, 3])],
        ),
    ));
    cases.push((
        "ctc_loss_from_log_probs",
        tensor_case(|g, v| ctc::ctc_graph_loss(g, v[0], &[2, 1]), vec![log_probs(49, 5, 3)]),
    ));
    cases.push((
        "bridge_stack_project",
        Box::new(|| {
            let mut s = ParamStore::new();
            bridge::init(&mut s, &StackConfig { n: 3, d_encoder: 2, d_llm: 3 }, 1);
            let x = randn(50, &[5, 2]);
            let names: Vec<String> = s.names().cloned().collect();
            grad_check_params(
                move |g| {
                    let e = g.constant(x.clone());
                    probe(g, bridge::bridge(g, e, 3)?, 29)
                },
                &s,
                &names,
                DEFAULT_STEP,
            )
        }),
    ));
    cases.push((
        "conformer_block",
        Box::new(|| {
            let cfg = tiny_encoder();
            let mut s = ParamStore::new();
            encoder::init(&mut s, &cfg, 3, None, 2);
            let names: Vec<String> = s.names().filter(|n| n.starts_with("encoder.layers.0.")).cloned().collect();
            let x = randn(51, &[4, 8]);
            grad_check_params(
                move |g| {
                    let xv = g.constant(x.clone());
                    probe(g, encoder::conformer_block(g, &cfg, 0, xv, None)?, 30)
                },
                &s,
                &names,
                DEFAULT_STEP,
            )
        }),
    ));
    cases.push((
        "encoder_ctc",
        Box::new(|| {
            let cfg = tiny_encoder();
            let mut s = ParamStore::new();
            encoder::init(&mut s, &cfg, 3, Some(3), 3);
            let names: Vec<String> = s.names().cloned().collect();
            let x = randn(52, &[40, 3]);
            grad_check_params(
                move |g| {
                    let f = g.constant(x.clone());
                    let e = encoder::encode(g, &cfg, f, None)?;
                    ctc::ctc_graph_loss(g, encoder::ctc_log_probs(g, e)?, &[1, 3, 3])
                },
                &s,
                &names,
                DEFAULT_STEP,
            )
        }),
    ));
    cases.push((
        "mixed_sequence_loss",
        Box::new(|| {
            let (s, enc, lm, lora) = tiny_joint_store(3, 7);
            let names: Vec<String> = s.trainable_names();
            let x = randn(53, &[40, 3]);
            grad_check_params(
                move |g| {
                    let f = g.constant(x.clone());
                    let e = encoder::encode(g, &enc, f, None)?;
                    let audio = bridge::bridge(g, e, 2)?;
                    declm::mixed_loss(g, &lm, &lora, Some(audio), &[2, 4, 5, 6], &[4, 5, 6, 3], None)
                },
                &s,
                &names,
                DEFAULT_STEP,
            )
        }),
    ));
    cases.push((
        "mixed_loss_wrt_audio",
        Box::new(|| {
            // the audio prefix is registered as a parameter so it is the only thing perturbed
            let (mut s, _, lm, lora) = tiny_joint_store(3, 7);
            s.insert("test.audio", randn(54, &[3, 8]), true);
            let names = vec!["test.audio".to_string()];
            grad_check_params(
                move |g| {
                    let audio = g.param("test.audio")?;
                    declm::mixed_loss(g, &lm, &lora, Some(audio), &[2, 4, 5], &[4, 5, 3], None)
                },
                &s,
                &names,
                DEFAULT_STEP,
            )
        }),
    ));
    cases
}

/// Write the overfit corpus into `dir`; returns the manifest path.
pub fn overfit_corpus(dir: &Path) -> PathBuf {
    speechlm::synth::write_corpus(dir, &speechlm::synth::OVERFIT_SET, &speechlm::synth::ToneSpec::default()).unwrap()
}

/// Desk-scale config used by the overfit harness: defaults without dropout.
pub fn harness_config(extra: &[&str]) -> RunConfig {
    let mut ov: Vec<String> = vec!["training.pretrain.dropout=0".into(), "training.joint.dropout=0".into()];
    ov.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml_with("", &ov).unwrap()
}
