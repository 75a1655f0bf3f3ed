use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};
use speechlm::checkpoint::Checkpoint;
use speechlm::config::RunConfig;
use speechlm::evalsuite::{self, ModelTranscriber};
use speechlm::model::SpeechModel;
use speechlm::trainer::{self, Corpus, TrainOptions};
use speechlm::Error;

#[derive(Parser)]
#[command(name = "speechlm", version, about = "Speech recognition with an audio-conditioned decoder-only LM")]
struct Cli {
    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lora_rank=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> speechlm::Result<RunConfig> {
        let mut ov = self.set.clone();
        if let Some(s) = self.seed {
            ov.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &ov)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out manifest; otherwise a fraction of `--manifest` is split off.
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Continue from the resume state in `--out-dir`.
    #[arg(long)]
    resume: bool,
    /// Save resume state and exit after this many steps.
    #[arg(long)]
    stop_after: Option<usize>,
}

impl TrainArgs {
    fn options(&self) -> TrainOptions {
        TrainOptions {
            out_dir: self.out_dir.clone(),
            stop_after: self.stop_after,
            resume: self.resume,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train the conformer encoder with CTC.
    Pretrain(TrainArgs),
    /// Stage 2: attach the LM and train encoder, bridge and adapters.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-1 encoder checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Greedy-decode audio files, one transcript per line.
    Transcribe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = speechlm::declm::MAX_DECODE_LEN)]
        max_len: usize,
        #[arg(required = true)]
        audio: Vec<PathBuf>,
    },
    /// Per-language WER over a manifest; writes eval.json and eval.txt.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
    },
    /// Cosine-similarity heatmap between audio and text embeddings of one utterance.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Utterance id (audio file stem) from the manifest.
        #[arg(long)]
        utterance: String,
        #[arg(long, default_value = "align")]
        out_dir: PathBuf,
    },
    /// Print a checkpoint's config, digest and parameter counts.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::DigestMismatch { .. } | Error::SequenceOverflow { .. } => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Audio { .. } | Error::TooLong { .. } | Error::Checkpoint(_) => 3,
        Error::Shape { .. } | Error::NonFinite(_) | Error::Diverged { .. } | Error::Io(_) => 1,
    }
}

fn all_languages() -> Vec<String> {
    speechlm::config::LANGUAGES.map(String::from).to_vec()
}

fn pretrain(a: &TrainArgs) -> speechlm::Result<()> {
    let cfg = a.cfg.load()?;
    let mut corpus = Corpus::load(&cfg, &a.manifest, a.valid_manifest.as_deref())?;
    let (_, report) = trainer::pretrain_encoder(&cfg, &mut corpus, &a.options())?;
    finish(&report);
    Ok(())
}

fn train(a: &TrainArgs, ckpt: &Path) -> speechlm::Result<()> {
    let cfg = a.cfg.load()?;
    let encoder = SpeechModel::load(ckpt)?;
    let mut corpus = Corpus::load(&cfg, &a.manifest, a.valid_manifest.as_deref())?;
    let (_, report) = trainer::train_joint(&cfg, &mut corpus, encoder, &a.options())?;
    finish(&report);
    Ok(())
}

fn finish(r: &trainer::TrainReport) {
    match &r.checkpoint {
        Some(p) => {
            info!("best validation loss {:.4} at step {}", r.best_valid_loss, r.best_step);
            println!("{}", p.display());
        }
        None => info!("stopped after {} steps; resume with --resume", r.steps),
    }
}

fn transcribe(ckpt: &Path, max_len: usize, audio: &[PathBuf]) -> speechlm::Result<()> {
    let model = SpeechModel::load(ckpt)?;
    for path in audio {
        let f = model.file_features(path)?;
        println!("{}", model.transcribe(&f, max_len)?);
    }
    Ok(())
}

fn eval(cfg: &ConfigArgs, ckpt: &Path, manifest: &Path, out_dir: &Path) -> speechlm::Result<()> {
    let cfg = cfg.load()?;
    let model = SpeechModel::load(ckpt)?;
    let entries = trainer::read_manifest(manifest, &cfg.eval.languages)?;
    let max_len = cfg.eval.max_decode_len;
    let digest = evalsuite::decode_digest(&model.config.digest(), max_len);
    let t = ModelTranscriber {
        model: &model,
        max_len,
    };
    let report = evalsuite::eval_corpus(&entries, &t, &digest)?;
    for s in &report.skipped {
        log::warn!("skipped {}: {}", s.audio_path.display(), s.reason);
    }
    std::fs::create_dir_all(out_dir)?;
    let table = report.to_table(&cfg.eval.languages);
    std::fs::write(out_dir.join("eval.json"), report.to_json())?;
    std::fs::write(out_dir.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn align(ckpt: &Path, manifest: &Path, utterance: &str, out_dir: &Path) -> speechlm::Result<()> {
    let model = SpeechModel::load(ckpt)?;
    let entries = trainer::read_manifest(manifest, &all_languages())?;
    let entry = entries
        .iter()
        .find(|e| trainer::utterance_id(&e.audio_path) == utterance)
        .ok_or_else(|| Error::Input(format!("utterance {utterance:?} not in {}", manifest.display())))?;
    let m = evalsuite::alignment_for_entry(&model, entry)?;
    let (csv, pgm) = evalsuite::export_heatmap(&m, &out_dir.join(utterance))?;
    println!(
        "{} x {} ({} ms per row), monotonicity {:.3}",
        m.rows,
        m.cols,
        m.stride_ms,
        evalsuite::monotonicity(&m)
    );
    println!("{}\n{}", csv.display(), pgm.display());
    Ok(())
}

fn inspect(ckpt: &Path) -> speechlm::Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let mut counts = BTreeMap::new();
    for (name, p) in ck.params.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let e: &mut (usize, usize) = counts.entry(group).or_default();
        e.0 += p.tensor.len();
        if p.trainable {
            e.1 += p.tensor.len();
        }
    }
    let params: BTreeMap<_, _> = counts
        .into_iter()
        .map(|(k, (total, trainable))| (k, serde_json::json!({"total": total, "trainable": trainable})))
        .collect();
    let out = serde_json::json!({
        "digest": ck.digest(),
        "config": ck.config,
        "vocab": ck.tokenizer.len(),
        "ctc_head": ck.params.contains(&format!("{}.weight", speechlm::encoder::CTC_HEAD)),
        "params": params,
        "meta": ck.meta,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Train { train: a, ckpt } => train(a, ckpt),
        Command::Transcribe { ckpt, max_len, audio } => transcribe(ckpt, *max_len, audio),
        Command::Eval {
            cfg,
            ckpt,
            manifest,
            out_dir,
        } => eval(cfg, ckpt, manifest, out_dir),
        Command::Align {
            ckpt,
            manifest,
            utterance,
            out_dir,
        } => align(ckpt, manifest, utterance, out_dir),
        Command::InspectCkpt { ckpt } => inspect(ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
