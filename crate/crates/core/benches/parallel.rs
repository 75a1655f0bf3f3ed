//! Parallel (rayon) vs sequential execution of the batch-level hot paths.
//! Build with `--no-default-features` to see the fallback on both sides.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use speechlm::ctc::{batch_ctc_loss, batch_ctc_loss_sequential, CtcItem};
use speechlm::encoder::{self, EncoderConfig};
use speechlm::frontend::{FrontendConfig, MelFrontend, Waveform};
use speechlm::numcore::{kernels, Graph, ParamStore, Tensor};
use speechlm::par;
use speechlm::rng::component_rng;
use speechlm::synth::ToneSpec;

fn ctc_items(n: usize) -> Vec<CtcItem<f32>> {
    (0..n)
        .map(|i| {
            let (u, v) = (120, 30);
            let mut lp: Tensor<f32> = speechlm::nn::normal(&mut component_rng(i as u64, "bench"), &[u, v], 1.0);
            for row in lp.data_mut().chunks_mut(v) {
                kernels::log_softmax_in_place(row);
            }
            CtcItem {
                log_probs: lp,
                labels: (0..40).map(|k| 1 + (k * 7 + i) % (v - 1)).collect(),
            }
        })
        .collect()
}

fn bench_ctc(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_ctc");
    for n in [8, 32] {
        let items = ctc_items(n);
        g.bench_with_input(BenchmarkId::new("parallel", n), &items, |b, it| b.iter(|| batch_ctc_loss(it).unwrap()));
        g.bench_with_input(BenchmarkId::new("sequential", n), &items, |b, it| {
            b.iter(|| batch_ctc_loss_sequential(it).unwrap())
        });
    }
    g.finish();
}

fn bench_features(c: &mut Criterion) {
    let fe = MelFrontend::new(&FrontendConfig::default()).unwrap();
    let spec = ToneSpec::default();
    let waves: Vec<Waveform> = ["hello world", "good morning", "see you soon", "the cat sat"]
        .iter()
        .cycle()
        .take(16)
        .map(|t| spec.synthesize(t).unwrap())
        .collect();
    let mut g = c.benchmark_group("features_batch");
    g.bench_function("parallel", |b| b.iter(|| fe.features_batch(&waves, None)));
    g.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(&waves, |w| fe.features(w, None)))
    });
    g.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let cfg = EncoderConfig::tiny();
    let mut store = ParamStore::<f32>::new();
    encoder::init(&mut store, &cfg, 80, Some(28), 0);
    let feats: Vec<Tensor<f32>> = (0..8)
        .map(|i| speechlm::nn::normal(&mut component_rng(i, "feats"), &[300, 80], 1.0))
        .collect();
    let grad = |x: &Tensor<f32>| {
        let g = Graph::with_params(&store);
        let emb = encoder::encode(&g, &cfg, g.constant(x.clone()), None).unwrap();
        let lp = encoder::ctc_log_probs(&g, emb).unwrap();
        let loss = speechlm::ctc::ctc_graph_loss(&g, lp, &[1, 2, 3, 4, 5]).unwrap();
        g.backward(loss).unwrap().into_params()
    };
    let mut g = c.benchmark_group("utterance_gradients");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| par::map(&feats, grad)));
    g.bench_function("sequential", |b| b.iter(|| par::map_sequential(&feats, grad)));
    g.finish();
}

criterion_group!(benches, bench_ctc, bench_features, bench_gradients);
criterion_main!(benches);
