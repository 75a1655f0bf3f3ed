//! End-to-end training behaviour on a tiny tone corpus: interrupt/resume
//! equivalence, determinism, and stage hand-off checks.

mod common;

use std::path::Path;

use speechlm::checkpoint::file_digest;
use speechlm::config::RunConfig;
use speechlm::declm;
use speechlm::model::SpeechModel;
use speechlm::trainer::{
    checkpoint_path, joint_model, log_path, pretrain_encoder, train_joint, Corpus, Stage, TrainOptions,
};
use speechlm::Error;

fn small_config(extra: &[&str]) -> RunConfig {
    let mut ov = vec![
        "encoder.num_layers=1",
        "encoder.d_model=16",
        "encoder.ffn_dim=32",
        "encoder.num_heads=2",
        "encoder.subsample_channels=8",
        "lm.d_llm=32",
        "lm.num_layers=1",
        "lm.num_heads=2",
        "lm.ffn_dim=64",
        "training.pretrain.max_steps=12",
        "training.pretrain.eval_interval=4",
        "training.joint.max_steps=12",
        "training.joint.eval_interval=4",
        "training.pretrain.batch_seconds=6.0",
        "training.joint.batch_seconds=6.0",
        "mask_fraction=0.2",
        "training.joint.dropout=0.1",
    ];
    ov.extend_from_slice(extra);
    common::harness_config(&ov)
}

fn pretrain(cfg: &RunConfig, manifest: &Path, opts: &TrainOptions) -> SpeechModel {
    let mut corpus = Corpus::load(cfg, manifest, None).unwrap();
    pretrain_encoder(cfg, &mut corpus, opts).unwrap().0
}

fn joint(cfg: &RunConfig, manifest: &Path, enc: &Path, opts: &TrainOptions) -> (SpeechModel, speechlm::trainer::TrainReport) {
    let mut corpus = Corpus::load(cfg, manifest, None).unwrap();
    train_joint(cfg, &mut corpus, SpeechModel::load(enc).unwrap(), opts).unwrap()
}

fn opts(dir: &Path) -> TrainOptions {
    TrainOptions {
        out_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn interrupted_runs_resume_to_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::overfit_corpus(&tmp.path().join("data"));
    let cfg = small_config(&[]);

    let straight = tmp.path().join("straight");
    pretrain(&cfg, &manifest, &opts(&straight));
    let split = tmp.path().join("split");
    let mut o = opts(&split);
    o.stop_after = Some(5);
    let mut corpus = Corpus::load(&cfg, &manifest, None).unwrap();
    let (_, rep) = pretrain_encoder(&cfg, &mut corpus, &o).unwrap();
    assert!(rep.interrupted && rep.checkpoint.is_none());
    assert_eq!(rep.steps, 5);
    o.stop_after = None;
    o.resume = true;
    pretrain(&cfg, &manifest, &o);
    let a = checkpoint_path(&straight, Stage::CtcPretrain);
    let b = checkpoint_path(&split, Stage::CtcPretrain);
    assert_eq!(file_digest(&a).unwrap(), file_digest(&b).unwrap());
    assert_eq!(
        std::fs::read_to_string(log_path(&straight, Stage::CtcPretrain)).unwrap(),
        std::fs::read_to_string(log_path(&split, Stage::CtcPretrain)).unwrap()
    );

    // Stage 2 with masking and dropout, interrupted twice.
    joint(&cfg, &manifest, &a, &opts(&straight));
    for stop in [Some(3), Some(9), None] {
        let o = TrainOptions {
            out_dir: split.clone(),
            stop_after: stop,
            resume: true,
        };
        joint(&cfg, &manifest, &a, &o);
    }
    assert_eq!(
        file_digest(&checkpoint_path(&straight, Stage::Joint)).unwrap(),
        file_digest(&checkpoint_path(&split, Stage::Joint)).unwrap()
    );
}

#[test]
fn same_seed_same_model_other_seed_differs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::overfit_corpus(&tmp.path().join("data"));
    let cfg = small_config(&[]);
    let a = pretrain(&cfg, &manifest, &opts(&tmp.path().join("a")));
    let b = pretrain(&cfg, &manifest, &opts(&tmp.path().join("b")));
    assert_eq!(a.params.digest(""), b.params.digest(""));
    let c = pretrain(&small_config(&["seed=7"]), &manifest, &opts(&tmp.path().join("c")));
    assert_ne!(a.params.digest(""), c.params.digest(""));
}

#[test]
fn stage_two_freezes_the_lm_and_checks_the_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::overfit_corpus(&tmp.path().join("data"));
    let cfg = small_config(&[]);
    let dir = tmp.path().join("run");
    pretrain(&cfg, &manifest, &opts(&dir));
    let enc = checkpoint_path(&dir, Stage::CtcPretrain);

    let m = joint_model(&cfg, SpeechModel::load(&enc).unwrap()).unwrap();
    assert!(!m.has_ctc_head());
    let lm = &m.joint().unwrap().lm;
    assert_eq!(m.params.count(declm::PREFIX, true), 0);
    assert_eq!(
        m.params.count(declm::LORA_PREFIX, true),
        m.joint().unwrap().lora.trainable_count(lm)
    );
    assert_eq!(m.embedding_ms(), Some(80 * cfg.bridge.stack_n));

    let frozen_before = m.params.digest(declm::PREFIX);
    let (trained, rep) = joint(&cfg, &manifest, &enc, &opts(&dir));
    assert_eq!(trained.params.digest(declm::PREFIX), frozen_before);
    assert!(rep.history.iter().all(|p| p.valid_loss.is_finite()));
    let saved = SpeechModel::load(&checkpoint_path(&dir, Stage::Joint)).unwrap();
    assert_eq!(saved.params, trained.params);

    let wider = small_config(&["encoder.d_model=32"]);
    match joint_model(&wider, SpeechModel::load(&enc).unwrap()) {
        Err(Error::DigestMismatch { .. }) => {}
        other => panic!("expected a digest mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn unfreezing_embeddings_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = common::overfit_corpus(&tmp.path().join("data"));
    let cfg = small_config(&["training.train_lm_embeddings=true", "lora_rank=0"]);
    let dir = tmp.path().join("run");
    pretrain(&cfg, &manifest, &opts(&dir));
    let m = joint_model(&cfg, SpeechModel::load(&checkpoint_path(&dir, Stage::CtcPretrain)).unwrap()).unwrap();
    let emb = m.params.get(declm::TOK_EMB).unwrap().len();
    assert_eq!(speechlm::trainer::trainable_lm_params(&m.params), emb);
}

#[test]
fn five_utterances_reach_low_ctc_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = speechlm::synth::write_corpus(
        &tmp.path().join("data"),
        &speechlm::synth::OVERFIT_SET[..5],
        &speechlm::synth::ToneSpec::default(),
    )
    .unwrap();
    let cfg = common::harness_config(&["training.pretrain.target_valid_loss=0.1", "training.pretrain.eval_interval=50"]);
    let mut corpus = Corpus::load(&cfg, &manifest, None).unwrap();
    let (_, rep) = pretrain_encoder(&cfg, &mut corpus, &opts(&tmp.path().join("run"))).unwrap();
    assert!(rep.best_valid_loss < 0.1, "{rep:?}");
    assert!(rep.steps <= 2000);
    let min = rep.history.iter().map(|p| p.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(rep.best_valid_loss, min);
    let best = rep.history.iter().find(|p| p.valid_loss == min).unwrap();
    assert_eq!(rep.best_step, best.step);
}
