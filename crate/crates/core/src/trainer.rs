//! Two-stage training: CTC pretraining of the encoder, then joint training of
//! encoder, bridge and LoRA adapters through the frozen LM.
//!
//! Each step draws a batch under an audio-seconds cap with language-balanced
//! sampling, computes per-utterance gradients in parallel and sums them in
//! batch order, so results do not depend on the thread count. Every random
//! draw comes from a stream keyed by (seed, purpose, step, item), which is
//! what makes interrupt-and-resume reproduce the uninterrupted run.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StageConfig};
use crate::declm;
use crate::error::{Error, Result};
use crate::frontend::{self, FeatureMatrix, MelFrontend, NormStats};
use crate::model::SpeechModel;
use crate::nn::Dropout;
use crate::numcore::{adam_step, clip_grad_norm, AdamState, Graph, ParamStore, Tensor};
use crate::par;
use crate::rng::{stream_rng, Rng};
use crate::tokenizer::{normalize, SpecialIds, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub text: String,
    pub language: String,
}

/// One JSON object per line; relative audio paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path, languages: &[String]) -> Result<Vec<ManifestEntry>> {
    let file = File::open(path).map_err(|_| Error::Input(format!("manifest not found: {}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let mut e: ManifestEntry =
            serde_json::from_str(&line).map_err(|err| Error::Input(format!("{}: {err}", at())))?;
        if normalize(&e.text).is_empty() {
            return Err(Error::Input(format!("{}: empty transcript", at())));
        }
        if !languages.contains(&e.language) {
            return Err(Error::Input(format!("{}: language {:?} not configured", at(), e.language)));
        }
        if e.audio_path.is_relative() {
            e.audio_path = base.join(&e.audio_path);
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("manifest {} has no entries", path.display())));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = File::create(path)?;
    for e in entries {
        writeln!(f, "{}", serde_json::to_string(e).expect("entry serializes"))?;
    }
    Ok(())
}

/// Replace each non-special input token by unk with probability `f`.
pub fn mask_tokens(ids: &[usize], f: f64, specials: SpecialIds, rng: &mut Rng) -> Vec<usize> {
    ids.iter()
        .map(|&id| {
            let special = [specials.pad, specials.unk, specials.bos, specials.eos].contains(&id);
            if special || f <= 0.0 {
                id
            } else if f >= 1.0 || rng.random::<f64>() < f {
                specials.unk
            } else {
                id
            }
        })
        .collect()
}

/// Languages drawn with probability ∝ hours^alpha.
#[derive(Clone, Debug)]
pub struct LanguageSampler {
    languages: Vec<String>,
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl LanguageSampler {
    pub fn new(hours: &BTreeMap<String, f64>, alpha: f64) -> Result<Self> {
        let mut languages = Vec::new();
        let mut weights = Vec::new();
        for (lang, &h) in hours {
            if h > 0.0 && h.is_finite() {
                languages.push(lang.clone());
                weights.push(h.powf(alpha));
            } else {
                warn!("language {lang} has no data and is excluded from sampling");
            }
        }
        if languages.is_empty() {
            return Err(Error::Input("no language has any data".into()));
        }
        let total: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights).map_err(|e| Error::Input(format!("sampler weights: {e}")))?;
        Ok(LanguageSampler {
            languages,
            probs,
            index,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn probability(&self, language: &str) -> f64 {
        self.languages
            .iter()
            .position(|l| l == language)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn draw(&self, rng: &mut Rng) -> &str {
        &self.languages[self.index.sample(rng)]
    }
}

/// One draw from the balanced language distribution.
pub fn balanced_sampler(hours: &BTreeMap<String, f64>, alpha: f64, rng: &mut Rng) -> Result<String> {
    Ok(LanguageSampler::new(hours, alpha)?.draw(rng).to_string())
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    /// Normalized transcript.
    pub text: String,
    pub seconds: f64,
    pub features: Tensor<f32>,
}

/// Load audio and compute raw (unnormalized) log-mel features in parallel.
pub fn load_utterances(entries: &[ManifestEntry], frontend: &MelFrontend) -> Result<Vec<Utterance>> {
    let loaded = par::map(entries, |e| -> Result<Utterance> {
        let wave = frontend::load_audio(&e.audio_path, frontend.config())?;
        let feats = frontend.log_mel(&wave)?;
        Ok(Utterance {
            id: utterance_id(&e.audio_path),
            language: e.language.clone(),
            text: normalize(&e.text),
            seconds: wave.duration_seconds(),
            features: feats.frames,
        })
    });
    loaded.into_iter().collect()
}

pub fn utterance_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn normalize_all(utts: &mut [Utterance], stats: &NormStats) -> Result<()> {
    for u in utts {
        let mut fm = FeatureMatrix {
            frames: std::mem::replace(&mut u.features, Tensor::zeros(&[0])),
        };
        stats.apply(&mut fm)?;
        u.features = fm.frames;
    }
    Ok(())
}

/// Deterministic held-out split: entries ordered by a hash of their path,
/// the first ⌊n·fraction⌋ become validation. An empty split validates on
/// the training set.
pub fn split_valid(entries: Vec<ManifestEntry>, fraction: f64) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
    let n_valid = (entries.len() as f64 * fraction).floor() as usize;
    if n_valid == 0 || n_valid >= entries.len() {
        warn!("no held-out split possible for {} utterances; validating on the training set", entries.len());
        return (entries.clone(), entries);
    }
    let mut keyed: Vec<(Vec<u8>, ManifestEntry)> = entries
        .into_iter()
        .map(|e| (Sha256::digest(e.audio_path.to_string_lossy().as_bytes()).to_vec(), e))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let mut valid: Vec<ManifestEntry> = Vec::new();
    let mut train = Vec::new();
    for (i, (_, e)) in keyed.into_iter().enumerate() {
        if i < n_valid {
            valid.push(e);
        } else {
            train.push(e);
        }
    }
    (train, valid)
}

pub struct Corpus {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
}

impl Corpus {
    /// Raw features for a training manifest and an optional validation manifest.
    pub fn load(cfg: &RunConfig, manifest: &Path, valid_manifest: Option<&Path>) -> Result<Self> {
        let langs = &cfg.training.languages;
        let entries = read_manifest(manifest, langs)?;
        let (train, valid) = match valid_manifest {
            Some(v) => (entries, read_manifest(v, langs)?),
            None => split_valid(entries, cfg.training.valid_fraction),
        };
        let fe = MelFrontend::new(&cfg.frontend)?;
        Ok(Corpus {
            train: load_utterances(&train, &fe)?,
            valid: load_utterances(&valid, &fe)?,
        })
    }

    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        normalize_all(&mut self.train, stats)?;
        normalize_all(&mut self.valid, stats)
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        let feats: Vec<FeatureMatrix> = self
            .train
            .iter()
            .map(|u| FeatureMatrix {
                frames: u.features.clone(),
            })
            .collect();
        NormStats::compute(&feats)
    }

    pub fn hours(&self) -> BTreeMap<String, f64> {
        let mut h = BTreeMap::new();
        for u in &self.train {
            *h.entry(u.language.clone()).or_insert(0.0) += u.seconds / 3600.0;
        }
        h
    }
}

/// Batch indices into `utts` for one step: languages by the sampler, then
/// uniform within language, until the next draw would exceed the cap.
pub fn draw_batch(utts: &[Utterance], sampler: &LanguageSampler, cap_seconds: f64, rng: &mut Rng) -> Vec<usize> {
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        by_lang.entry(u.language.as_str()).or_default().push(i);
    }
    let mut batch = Vec::new();
    let mut total = 0.0;
    loop {
        let lang = sampler.draw(rng);
        let pool = &by_lang[lang];
        let idx = pool[rng.random_range(0..pool.len())];
        let s = utts[idx].seconds;
        if !batch.is_empty() && total + s > cap_seconds {
            break;
        }
        batch.push(idx);
        total += s;
    }
    batch
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CtcPretrain,
    Joint,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::CtcPretrain => "pretrain",
            Stage::Joint => "joint",
        }
    }

    fn id(self) -> u64 {
        match self {
            Stage::CtcPretrain => 1,
            Stage::Joint => 2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Writes `<stage>.slmf`, `<stage>.csv` and the resume state here.
    pub out_dir: PathBuf,
    /// Stop (saving resumable state) once this many steps are done.
    pub stop_after: Option<usize>,
    /// Continue from saved state if present.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub history: Vec<EvalPoint>,
    /// Utterances skipped as infeasible (CTC: too few frames for the labels).
    pub skipped: usize,
    pub stopped_early: bool,
    pub interrupted: bool,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Progress {
    step: usize,
    best_step: usize,
    #[serde(with = "float_text")]
    best_valid_loss: f64,
    bad_evals: usize,
    skipped: usize,
    #[serde(with = "float_text")]
    last_train_loss: f64,
    history: Vec<EvalPoint>,
}

/// JSON has no inf/NaN; Rust's float formatting round-trips them exactly.
mod float_text {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.slmf", stage.name()))
}

pub fn log_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.csv", stage.name()))
}

fn state_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.state.slmf", stage.name()))
}

/// Trainable parameters under `lm.*` and `lora.*`.
pub fn trainable_lm_params(params: &ParamStore<f32>) -> usize {
    params.count(declm::PREFIX, true) + params.count(declm::LORA_PREFIX, true)
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    stage_cfg: &'a StageConfig,
    corpus: &'a Corpus,
    sampler: LanguageSampler,
}

type StepGrads = Option<(f64, BTreeMap<String, Tensor<f32>>)>;

impl Trainer<'_> {
    fn seed(&self) -> u64 {
        self.cfg.training.seed
    }

    fn dropout(&self, step: usize, item: usize) -> Option<Dropout> {
        let p = self.stage_cfg.dropout;
        (p > 0.0).then(|| Dropout::new(p, stream_rng(self.seed(), "dropout", &[self.stage.id(), step as u64, item as u64])))
    }

    /// Loss on one utterance, or `None` when CTC cannot align it.
    fn utterance_loss(
        &self,
        model: &SpeechModel,
        g: &Graph<'_, f32>,
        u: &Utterance,
        train_step: Option<(usize, usize)>,
    ) -> Result<Option<crate::numcore::Var>> {
        let drop = train_step.and_then(|(s, k)| self.dropout(s, k));
        let x = g.constant(u.features.clone());
        match self.stage {
            Stage::CtcPretrain => {
                let labels = model.tokenizer.ctc_labels(&u.text)?;
                let frames = crate::encoder::output_len(u.features.rows(), self.cfg.encoder.subsample_stride);
                if !crate::ctc::is_feasible(frames, &labels) {
                    return Ok(None);
                }
                model.ctc_loss(g, x, &labels, drop.as_ref()).map(Some)
            }
            Stage::Joint => {
                let specials = model.tokenizer.specials();
                let ids = model.tokenizer.encode(&u.text);
                let (inputs, targets) = declm::teacher_forcing(&ids, specials);
                let inputs = match train_step {
                    Some((s, k)) => {
                        let f = self.cfg.training.mask_fraction_for(&u.language);
                        let mut rng = stream_rng(self.seed(), "mask", &[s as u64, k as u64]);
                        mask_tokens(&inputs, f, specials, &mut rng)
                    }
                    None => inputs,
                };
                let (_, check) = declm::teacher_forcing(&ids, specials);
                assert_eq!(targets, check, "masking must never alter prediction targets");
                model.joint_loss(g, x, &inputs, &targets, drop.as_ref()).map(Some)
            }
        }
    }

    fn grads(&self, model: &SpeechModel, step: usize, batch: &[usize]) -> Result<Vec<StepGrads>> {
        let items: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
        par::map(&items, |&(k, idx)| -> Result<StepGrads> {
            let g = Graph::with_params(&model.params);
            let Some(loss) = self.utterance_loss(model, &g, &self.corpus.train[idx], Some((step, k)))? else {
                return Ok(None);
            };
            let value = g.item(loss) as f64;
            let grads = g.backward(loss)?.into_params();
            Ok(Some((value, grads)))
        })
        .into_iter()
        .collect()
    }

    fn valid_loss(&self, model: &SpeechModel) -> Result<f64> {
        let losses = par::map(&self.corpus.valid, |u| -> Result<Option<f64>> {
            let g = Graph::inference(&model.params);
            Ok(self.utterance_loss(model, &g, u, None)?.map(|l| g.item(l) as f64))
        });
        let mut sum = 0.0;
        let mut n = 0usize;
        for l in losses {
            if let Some(l) = l? {
                sum += l;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Input("no usable validation utterance".into()));
        }
        Ok(sum / n as f64)
    }

    fn save_state(
        &self,
        path: &Path,
        model: &SpeechModel,
        adam: &AdamState<f32>,
        best: &ParamStore<f32>,
        progress: &Progress,
    ) -> Result<()> {
        let mut ck = model.to_checkpoint(BTreeMap::new());
        ck.meta.insert("progress".into(), serde_json::to_value(progress).expect("progress serializes"));
        ck.meta.insert("adam_step".into(), serde_json::json!(adam.step));
        for (name, t) in &adam.m {
            ck.extra.insert(format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &adam.v {
            ck.extra.insert(format!("adam.v.{name}"), t.clone());
        }
        for (name, p) in best.iter() {
            ck.extra.insert(format!("best.{name}"), p.tensor.clone());
        }
        ck.save(path)
    }

    fn load_state(
        &self,
        path: &Path,
        model: &mut SpeechModel,
    ) -> Result<(AdamState<f32>, ParamStore<f32>, Progress)> {
        let ck = Checkpoint::load_expecting(path, &model.config)?;
        let progress: Progress = ck
            .meta
            .get("progress")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| Error::Checkpoint("resume state has no progress record".into()))?;
        let mut adam = AdamState::new(self.cfg.training.adam);
        adam.step = ck.meta.get("adam_step").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut best = ck.params.clone();
        for (name, t) in ck.extra {
            if let Some(n) = name.strip_prefix("adam.m.") {
                adam.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam.v.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("best.") {
                *best.get_mut(n)? = t;
            }
        }
        model.params = ck.params;
        Ok((adam, best, progress))
    }

    fn run(&self, model: &mut SpeechModel, opts: &TrainOptions) -> Result<TrainReport> {
        let sc = self.stage_cfg;
        std::fs::create_dir_all(&opts.out_dir)?;
        let state_file = state_path(&opts.out_dir, self.stage);
        let log_file = log_path(&opts.out_dir, self.stage);
        let resuming = opts.resume && state_file.exists();
        let (mut adam, mut best, mut progress) = if resuming {
            info!("resuming {} from {}", self.stage.name(), state_file.display());
            self.load_state(&state_file, model)?
        } else {
            let mut f = File::create(&log_file)?;
            writeln!(f, "step,lr,train_loss,valid_loss")?;
            (
                AdamState::new(self.cfg.training.adam),
                model.params.clone(),
                Progress {
                    step: 0,
                    best_step: 0,
                    best_valid_loss: f64::INFINITY,
                    bad_evals: 0,
                    skipped: 0,
                    last_train_loss: f64::NAN,
                    history: Vec::new(),
                },
            )
        };
        let mut log = OpenOptions::new().append(true).open(&log_file)?;
        let start = progress.step;
        let mut stopped_early = false;
        let mut interrupted = false;

        while progress.step < sc.max_steps {
            if opts.stop_after.is_some_and(|s| progress.step >= s && progress.step > start) {
                self.save_state(&state_file, model, &adam, &best, &progress)?;
                interrupted = true;
                break;
            }
            let step = progress.step;
            let mut rng = stream_rng(self.seed(), "batch", &[self.stage.id(), step as u64]);
            let batch = draw_batch(&self.corpus.train, &self.sampler, sc.batch_seconds, &mut rng);

            let mut total: Option<BTreeMap<String, Tensor<f32>>> = None;
            let mut loss_sum = 0.0;
            let mut used = 0usize;
            for r in self.grads(model, step, &batch)? {
                let Some((loss, grads)) = r else {
                    progress.skipped += 1;
                    continue;
                };
                loss_sum += loss;
                used += 1;
                match total.as_mut() {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            let a = acc.get_mut(&name).expect("every utterance touches the same parameters");
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let lr = sc.schedule.lr(step + 1);
            if let Some(mut grads) = total {
                let train_loss = loss_sum / used as f64;
                if !train_loss.is_finite() {
                    self.finish(model, &best, &progress, opts)?;
                    return Err(Error::Diverged {
                        step,
                        detail: format!("train loss {train_loss}; best checkpoint kept"),
                    });
                }
                let inv = 1.0 / used as f32;
                for g in grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
                clip_grad_norm(&mut grads, self.cfg.training.clip_norm);
                if let Err(e) = adam_step(&mut model.params, &grads, &mut adam, lr) {
                    self.finish(model, &best, &progress, opts)?;
                    return Err(Error::Diverged {
                        step,
                        detail: e.to_string(),
                    });
                }
                progress.last_train_loss = train_loss;
            } else {
                warn!("step {step}: every utterance in the batch was skipped");
            }
            progress.step += 1;

            let step = progress.step;
            let mut valid_cell = String::new();
            if step % sc.eval_interval == 0 || step == sc.max_steps {
                let valid = self.valid_loss(model)?;
                valid_cell = format!("{valid:.6}");
                progress.history.push(EvalPoint {
                    step,
                    lr,
                    train_loss: progress.last_train_loss,
                    valid_loss: valid,
                });
                info!(
                    "{} step {step}: lr {lr:.3e} train {:.4} valid {valid:.4}",
                    self.stage.name(),
                    progress.last_train_loss
                );
                if valid < progress.best_valid_loss {
                    progress.best_valid_loss = valid;
                    progress.best_step = step;
                    progress.bad_evals = 0;
                    best = model.params.clone();
                } else {
                    progress.bad_evals += 1;
                }
                if progress.bad_evals >= sc.patience {
                    info!("{}: no improvement in {} evaluations, stopping", self.stage.name(), sc.patience);
                    stopped_early = true;
                }
                if sc.target_valid_loss.is_some_and(|t| progress.best_valid_loss < t) {
                    info!("{}: validation loss below target, stopping", self.stage.name());
                    stopped_early = true;
                }
            }
            writeln!(log, "{step},{lr:.6e},{:.6},{valid_cell}", progress.last_train_loss)?;
            if stopped_early {
                break;
            }
        }

        let checkpoint = if interrupted {
            None
        } else {
            let path = self.finish(model, &best, &progress, opts)?;
            let _ = std::fs::remove_file(&state_file);
            Some(path)
        };
        Ok(TrainReport {
            stage: self.stage,
            steps: progress.step,
            best_step: progress.best_step,
            best_valid_loss: progress.best_valid_loss,
            history: progress.history,
            skipped: progress.skipped,
            stopped_early,
            interrupted,
            checkpoint,
        })
    }

    /// Install the best parameters and write the stage checkpoint.
    fn finish(&self, model: &mut SpeechModel, best: &ParamStore<f32>, progress: &Progress, opts: &TrainOptions) -> Result<PathBuf> {
        model.params = best.clone();
        let mut meta = BTreeMap::new();
        meta.insert("stage".into(), serde_json::to_value(self.stage).expect("stage serializes"));
        meta.insert("best_step".into(), serde_json::json!(progress.best_step));
        if progress.best_valid_loss.is_finite() {
            meta.insert("best_valid_loss".into(), serde_json::json!(progress.best_valid_loss));
        }
        let path = checkpoint_path(&opts.out_dir, self.stage);
        model.save(&path, meta)?;
        Ok(path)
    }
}

/// Stage 1: build tokenizer and normalization from the corpus, train the
/// encoder with its CTC head, return the best-validation model.
pub fn pretrain_encoder(cfg: &RunConfig, corpus: &mut Corpus, opts: &TrainOptions) -> Result<(SpeechModel, TrainReport)> {
    cfg.validate()?;
    let stats = corpus.norm_stats()?;
    corpus.normalize(&stats)?;
    let tokenizer = Tokenizer::from_texts(corpus.train.iter().chain(&corpus.valid).map(|u| u.text.as_str()));
    let mut model = SpeechModel::new_encoder(&cfg.frontend, &cfg.encoder, tokenizer, stats, cfg.training.seed)?;
    info!(
        "pretrain: {} train / {} valid utterances, {} CTC symbols, {} encoder parameters",
        corpus.train.len(),
        corpus.valid.len(),
        model.tokenizer.ctc_vocab(),
        model.params.count("", true)
    );
    let trainer = Trainer {
        cfg,
        stage: Stage::CtcPretrain,
        stage_cfg: &cfg.training.pretrain,
        corpus,
        sampler: LanguageSampler::new(&corpus.hours(), cfg.training.sampling_alpha)?,
    };
    let report = trainer.run(&mut model, opts)?;
    Ok((model, report))
}

/// Build the stage-2 model from a stage-1 encoder.
pub fn joint_model(cfg: &RunConfig, mut encoder: SpeechModel) -> Result<SpeechModel> {
    if encoder.config.frontend != cfg.frontend || encoder.config.encoder != cfg.encoder {
        let mut expected = encoder.config.clone();
        expected.frontend = cfg.frontend.clone();
        expected.encoder = cfg.encoder.clone();
        return Err(Error::DigestMismatch {
            stored: encoder.config.encoder_digest(),
            expected: expected.encoder_digest(),
        });
    }
    if encoder.config.joint.is_some() {
        return Err(Error::Checkpoint("expected a stage-1 encoder checkpoint".into()));
    }
    let lm = cfg.lm.resolve(encoder.tokenizer.lm_vocab_size())?;
    encoder.attach_lm(&cfg.bridge, lm, cfg.lora, cfg.training.train_lm_embeddings, cfg.training.seed)?;
    Ok(encoder)
}

/// Stage 2: train encoder, bridge and adapters through the frozen LM.
/// `corpus` must hold raw features; the encoder's statistics are applied here.
pub fn train_joint(
    cfg: &RunConfig,
    corpus: &mut Corpus,
    encoder: SpeechModel,
    opts: &TrainOptions,
) -> Result<(SpeechModel, TrainReport)> {
    cfg.validate()?;
    let mut model = joint_model(cfg, encoder)?;
    corpus.normalize(&model.norm)?;
    info!(
        "joint: embedding rate {} ms, trainable LM parameters: {}, trainable total: {}",
        model.embedding_ms().unwrap_or(0),
        trainable_lm_params(&model.params),
        model.params.count("", true)
    );
    let trainer = Trainer {
        cfg,
        stage: Stage::Joint,
        stage_cfg: &cfg.training.joint,
        corpus,
        sampler: LanguageSampler::new(&corpus.hours(), cfg.training.sampling_alpha)?,
    };
    let report = trainer.run(&mut model, opts)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;
    use crate::tokenizer::SPECIALS;

    #[test]
    fn masking_endpoints() {
        let ids = [2, 5, 6, 7, 3];
        let mut rng = component_rng(1, "m");
        assert_eq!(mask_tokens(&ids, 0.0, SPECIALS, &mut rng), ids);
        assert_eq!(mask_tokens(&ids, 1.0, SPECIALS, &mut rng), vec![2, 1, 1, 1, 3]);
    }

    #[test]
    fn sampler_power_law() {
        let hours: BTreeMap<String, f64> = [("en".to_string(), 100.0), ("pl".to_string(), 1.0)].into();
        let s = LanguageSampler::new(&hours, 0.5).unwrap();
        assert!((s.probability("en") / s.probability("pl") - 10.0).abs() < 1e-12);
        let s = LanguageSampler::new(&hours, 0.0).unwrap();
        assert_eq!(s.probability("en"), 0.5);
        let s = LanguageSampler::new(&hours, 1.0).unwrap();
        assert!((s.probability("en") - 100.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_excludes_empty_languages() {
        let hours: BTreeMap<String, f64> = [("en".to_string(), 2.0), ("pl".to_string(), 0.0)].into();
        let s = LanguageSampler::new(&hours, 0.5).unwrap();
        assert_eq!(s.languages(), &["en".to_string()]);
        assert_eq!(s.probability("pl"), 0.0);
        let none: BTreeMap<String, f64> = [("pl".to_string(), 0.0)].into();
        assert!(LanguageSampler::new(&none, 0.5).is_err());
    }

    fn entry(i: usize) -> ManifestEntry {
        ManifestEntry {
            audio_path: PathBuf::from(format!("/data/u{i}.wav")),
            text: "x".into(),
            language: "en".into(),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let entries: Vec<_> = (0..100).map(entry).collect();
        let (t1, v1) = split_valid(entries.clone(), 0.05);
        let (t2, v2) = split_valid(entries, 0.05);
        assert_eq!((t1.len(), v1.len()), (95, 5));
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert!(v1.iter().all(|v| !t1.contains(v)));
        let (t, v) = split_valid((0..8).map(entry).collect(), 0.05);
        assert_eq!(t, v);
    }

    #[test]
    fn manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let langs = vec!["en".to_string()];
        assert!(matches!(
            read_manifest(&dir.path().join("missing.jsonl"), &langs),
            Err(Error::Input(m)) if m.contains("manifest not found")
        ));
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"audio_path\":\"a.wav\",\"text\":\"Hi!\",\"language\":\"en\"}\n\n").unwrap();
        let m = read_manifest(&p, &langs).unwrap();
        assert_eq!(m[0].audio_path, dir.path().join("a.wav"));
        std::fs::write(&p, "{\"audio_path\":\"a.wav\",\"text\":\"?!\",\"language\":\"en\"}\n").unwrap();
        assert!(read_manifest(&p, &langs).is_err());
        std::fs::write(&p, "{\"audio_path\":\"a.wav\",\"text\":\"hi\",\"language\":\"xx\"}\n").unwrap();
        assert!(read_manifest(&p, &langs).is_err());
    }

    #[test]
    fn batches_respect_cap() {
        let utts: Vec<Utterance> = (0..6)
            .map(|i| Utterance {
                id: i.to_string(),
                language: if i < 3 { "en" } else { "de" }.into(),
                text: "a".into(),
                seconds: 1.0 + i as f64,
                features: Tensor::zeros(&[1, 1]),
            })
            .collect();
        let hours: BTreeMap<String, f64> = [("en".to_string(), 1.0), ("de".to_string(), 1.0)].into();
        let s = LanguageSampler::new(&hours, 0.5).unwrap();
        for seed in 0..50 {
            let b = draw_batch(&utts, &s, 7.0, &mut component_rng(seed, "b"));
            let total: f64 = b.iter().map(|&i| utts[i].seconds).sum();
            assert!(!b.is_empty());
            assert!(total <= 7.0 || b.len() == 1);
        }
        let b = draw_batch(&utts, &s, 0.5, &mut component_rng(0, "b"));
        assert_eq!(b.len(), 1);
    }
}
