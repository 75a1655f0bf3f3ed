//! Run configuration: one TOML file with sections `frontend`, `encoder`,
//! `bridge`, `lm`, `lora`, `training`, `eval`, plus `key=value` overrides.
//!
//! Defaults are desk scale. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::BridgeConfig;
use crate::declm::{LmConfig, LmPreset, LoraConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::numcore::{AdamConfig, LrSchedule};
use crate::tokenizer::SPECIALS;

/// Table 1 column order.
pub const LANGUAGES: [&str; 8] = ["en", "de", "nl", "fr", "es", "it", "pt", "pl"];

/// Short names for the ablation axes.
const ALIASES: [(&str, &str); 7] = [
    ("stack_n", "bridge.stack_n"),
    ("encoder_layers", "encoder.num_layers"),
    ("lora_rank", "lora.rank"),
    ("lora_alpha", "lora.alpha"),
    ("mask_fraction", "training.mask_fraction"),
    ("lm_preset", "lm.preset"),
    ("seed", "training.seed"),
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub bridge: BridgeConfig,
    pub lm: LmSection,
    pub lora: LoraConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

/// LM preset plus optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub preset: LmPreset,
    pub d_llm: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_positions: Option<usize>,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            preset: LmPreset::Tiny,
            d_llm: None,
            num_layers: None,
            num_heads: None,
            ffn_dim: None,
            max_positions: None,
        }
    }
}

impl LmSection {
    pub fn resolve(&self, vocab_size: usize) -> Result<LmConfig> {
        let mut c = LmConfig::preset(self.preset, vocab_size, SPECIALS);
        c.d_llm = self.d_llm.unwrap_or(c.d_llm);
        c.num_layers = self.num_layers.unwrap_or(c.num_layers);
        c.num_heads = self.num_heads.unwrap_or(c.num_heads);
        c.ffn_dim = self.ffn_dim.unwrap_or(c.ffn_dim);
        c.max_positions = self.max_positions.unwrap_or(c.max_positions);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub schedule: LrSchedule,
    pub max_steps: usize,
    /// Audio seconds per batch (at least one utterance is always drawn).
    pub batch_seconds: f64,
    pub eval_interval: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    /// Stop once validation loss falls below this.
    pub target_valid_loss: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl StageConfig {
    fn pretrain() -> Self {
        StageConfig {
            schedule: LrSchedule {
                peak_lr: 1e-3,
                final_lr: 1e-5,
                warmup_steps: 200,
                total_steps: 2000,
            },
            max_steps: 2000,
            batch_seconds: 20.0,
            eval_interval: 100,
            patience: 10,
            dropout: 0.1,
            target_valid_loss: None,
        }
    }

    fn joint() -> Self {
        StageConfig {
            schedule: LrSchedule {
                peak_lr: 5e-4,
                final_lr: 5e-6,
                warmup_steps: 100,
                total_steps: 5000,
            },
            max_steps: 5000,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        self.schedule.validate()?;
        if !(self.batch_seconds > 0.0) {
            return Err(Error::Config(format!("training.{name}.batch_seconds must be positive")));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config(format!("training.{name}.eval_interval must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("training.{name}.dropout must be in [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Allowed language tags.
    pub languages: Vec<String>,
    pub sampling_alpha: f64,
    /// Probability F of replacing an input text token with unk.
    pub mask_fraction: f64,
    /// Per-language F, overriding `mask_fraction`.
    pub mask_overrides: BTreeMap<String, f64>,
    /// Held-out share when no validation manifest is given.
    pub valid_fraction: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Also train `lm.tok_emb`.
    pub train_lm_embeddings: bool,
    pub pretrain: StageConfig,
    pub joint: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            languages: LANGUAGES.iter().map(|s| s.to_string()).collect(),
            sampling_alpha: 0.5,
            mask_fraction: 0.0,
            mask_overrides: BTreeMap::new(),
            valid_fraction: 0.05,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            train_lm_embeddings: false,
            pretrain: StageConfig::pretrain(),
            joint: StageConfig::joint(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, what: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be in [0, 1], got {v}")))
            }
        };
        unit(self.mask_fraction, "training.mask_fraction")?;
        for (lang, &f) in &self.mask_overrides {
            unit(f, &format!("training.mask_overrides.{lang}"))?;
        }
        unit(self.sampling_alpha, "training.sampling_alpha")?;
        unit(self.valid_fraction, "training.valid_fraction")?;
        if self.languages.is_empty() {
            return Err(Error::Config("training.languages is empty".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("training.clip_norm must be positive".into()));
        }
        self.pretrain.validate("pretrain")?;
        self.joint.validate("joint")
    }

    pub fn mask_fraction_for(&self, language: &str) -> f64 {
        self.mask_overrides.get(language).copied().unwrap_or(self.mask_fraction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_decode_len: usize,
    /// Report column order.
    pub languages: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_decode_len: crate::declm::MAX_DECODE_LEN,
            languages: LANGUAGES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse, then apply `key=value` overrides (highest precedence).
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut user, ov)?;
        }
        // Merge onto the full default tree so partial sections keep their own defaults.
        let mut table = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut table, user);
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Input(format!("config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.bridge.validate()?;
        self.training.validate()?;
        if self.eval.max_decode_len == 0 {
            return Err(Error::Config("eval.max_decode_len must be positive".into()));
        }
        self.lm.resolve(SPECIALS.eos + 1).map(|_| ())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
    let key = key.trim();
    let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, full)| *full);
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Architecture of a saved model; its digest pins checkpoints to configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub ctc_vocab: usize,
    pub joint: Option<JointConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub bridge: BridgeConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
}

fn sha256_json<S: Serialize>(v: &S) -> String {
    let json = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

impl ModelConfig {
    pub fn digest(&self) -> String {
        sha256_json(self)
    }

    /// Digest of the frontend and encoder alone.
    pub fn encoder_digest(&self) -> String {
        sha256_json(&(&self.frontend, &self.encoder))
    }
}
