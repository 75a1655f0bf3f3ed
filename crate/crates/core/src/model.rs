//! The complete recognizer: frontend statistics, tokenizer and parameters
//! for the encoder and, after stage 2, the bridge and LM.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bridge::{self, StackConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{JointConfig, ModelConfig};
use crate::ctc;
use crate::declm::{self, LmConfig, LoraConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, MelFrontend, NormStats, Waveform};
use crate::nn::Dropout;
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::tokenizer::Tokenizer;
use crate::bridge::BridgeConfig;

pub struct SpeechModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub tokenizer: Tokenizer,
    pub norm: NormStats,
    frontend: MelFrontend,
}

impl SpeechModel {
    /// Fresh encoder with a CTC head over the tokenizer's characters.
    pub fn new_encoder(
        frontend: &FrontendConfig,
        encoder: &EncoderConfig,
        tokenizer: Tokenizer,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self> {
        encoder.validate()?;
        let mut params = ParamStore::new();
        encoder::init(&mut params, encoder, frontend.n_mels, Some(tokenizer.ctc_vocab()), seed);
        let config = ModelConfig {
            frontend: frontend.clone(),
            encoder: encoder.clone(),
            ctc_vocab: tokenizer.ctc_vocab(),
            joint: None,
        };
        Self::assemble(config, params, tokenizer, norm)
    }

    fn assemble(config: ModelConfig, params: ParamStore<f32>, tokenizer: Tokenizer, norm: NormStats) -> Result<Self> {
        let frontend = MelFrontend::new(&config.frontend)?;
        Ok(SpeechModel {
            config,
            params,
            tokenizer,
            norm,
            frontend,
        })
    }

    /// Drop the CTC head and add bridge, frozen LM and LoRA adapters.
    pub fn attach_lm(
        &mut self,
        bridge_cfg: &BridgeConfig,
        lm: LmConfig,
        lora: LoraConfig,
        train_lm_embeddings: bool,
        seed: u64,
    ) -> Result<()> {
        bridge_cfg.validate()?;
        lm.validate()?;
        if lm.vocab_size != self.tokenizer.lm_vocab_size() {
            return Err(Error::Config(format!(
                "lm vocab {} does not match tokenizer vocab {}",
                lm.vocab_size,
                self.tokenizer.lm_vocab_size()
            )));
        }
        self.params.remove_prefix(encoder::CTC_HEAD);
        let stack = StackConfig {
            n: bridge_cfg.stack_n,
            d_encoder: self.config.encoder.d_model,
            d_llm: lm.d_llm,
        };
        bridge::init(&mut self.params, &stack, seed);
        declm::init(&mut self.params, &lm, seed);
        declm::init_lora(&mut self.params, &lm, &lora, seed);
        if train_lm_embeddings {
            self.params.set_trainable_prefix(declm::TOK_EMB, true);
        }
        self.config.joint = Some(JointConfig {
            bridge: bridge_cfg.clone(),
            lm,
            lora,
        });
        Ok(())
    }

    pub fn joint(&self) -> Result<&JointConfig> {
        self.config
            .joint
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no language model (stage-1 checkpoint?)".into()))
    }

    pub fn has_ctc_head(&self) -> bool {
        self.params.contains(&format!("{}.weight", encoder::CTC_HEAD))
    }

    /// Embedding duration in milliseconds after stacking.
    pub fn embedding_ms(&self) -> Option<usize> {
        let j = self.config.joint.as_ref()?;
        Some(self.config.encoder.frame_ms() * j.bridge.stack_n)
    }

    pub fn load_audio(&self, path: &Path) -> Result<Waveform> {
        frontend::load_audio(path, &self.config.frontend)
    }

    /// Normalized log-mel features [T, n_mels].
    pub fn features(&self, wave: &Waveform) -> Result<Tensor<f32>> {
        Ok(self.frontend.features(wave, Some(&self.norm))?.frames)
    }

    pub fn file_features(&self, path: &Path) -> Result<Tensor<f32>> {
        self.features(&self.load_audio(path)?)
    }

    // ---- graph builders ----

    /// CTC loss for one utterance.
    pub fn ctc_loss(&self, g: &Graph<'_, f32>, features: Var, labels: &[usize], drop: Option<&Dropout>) -> Result<Var> {
        let emb = encoder::encode(g, &self.config.encoder, features, drop)?;
        ctc::ctc_graph_loss(g, encoder::ctc_log_probs(g, emb)?, labels)
    }

    /// LM-space audio embeddings [M, d_llm].
    pub fn audio_embeddings_graph(&self, g: &Graph<'_, f32>, features: Var, drop: Option<&Dropout>) -> Result<Var> {
        let j = self.joint()?;
        let emb = encoder::encode(g, &self.config.encoder, features, drop)?;
        bridge::bridge(g, emb, j.bridge.stack_n)
    }

    /// Next-token loss over `[bos, inputs..]` predicting `targets`.
    pub fn joint_loss(
        &self,
        g: &Graph<'_, f32>,
        features: Var,
        inputs: &[usize],
        targets: &[usize],
        drop: Option<&Dropout>,
    ) -> Result<Var> {
        let j = self.joint()?;
        let audio = self.audio_embeddings_graph(g, features, drop)?;
        declm::mixed_loss(g, &j.lm, &j.lora, Some(audio), inputs, targets, drop)
    }

    // ---- inference ----

    pub fn audio_embeddings(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::inference(&self.params);
        let x = g.constant(features.clone());
        let a = self.audio_embeddings_graph(&g, x, None)?;
        Ok(g.value(a))
    }

    /// Greedy LM decode to token ids (bos/eos excluded).
    pub fn decode_ids(&self, features: &Tensor<f32>, max_len: usize) -> Result<Vec<usize>> {
        let j = self.joint()?;
        let audio = self.audio_embeddings(features)?;
        declm::greedy_decode(&self.params, &j.lm, &j.lora, &audio, max_len)
    }

    pub fn transcribe_features(&self, features: &Tensor<f32>, max_len: usize) -> Result<String> {
        Ok(self.tokenizer.decode(&self.decode_ids(features, max_len)?))
    }

    /// Greedy CTC decode from the stage-1 head.
    pub fn ctc_transcribe(&self, features: &Tensor<f32>) -> Result<String> {
        let (_, logits) = encoder::encode_tensor(&self.params, &self.config.encoder, features)?;
        let mut logits = logits.ok_or_else(|| Error::Checkpoint("CTC head was discarded after pretraining".into()))?;
        let v = logits.cols();
        for row in logits.data_mut().chunks_mut(v) {
            crate::numcore::kernels::log_softmax_in_place(row);
        }
        Ok(self.tokenizer.ctc_decode(&ctc::ctc_greedy_decode(&logits)))
    }

    /// Whichever decoder the model has: the LM after stage 2, CTC before.
    pub fn transcribe(&self, features: &Tensor<f32>, max_len: usize) -> Result<String> {
        if self.config.joint.is_some() {
            self.transcribe_features(features, max_len)
        } else {
            self.ctc_transcribe(features)
        }
    }

    /// Fold adapters into the LM weights; the result has no `lora.*` keys.
    pub fn merge_lora(&mut self) -> Result<()> {
        let j = self.joint()?.clone();
        declm::merge_all(&mut self.params, &j.lm, &j.lora)?;
        if let Some(j) = self.config.joint.as_mut() {
            j.lora.rank = 0;
        }
        Ok(())
    }

    // ---- persistence ----

    pub fn to_checkpoint(&self, meta: BTreeMap<String, serde_json::Value>) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tokenizer: self.tokenizer.table(),
            norm: self.norm.clone(),
            meta,
            params: self.params.clone(),
            extra: BTreeMap::new(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let tokenizer = Tokenizer::from_table(&ck.tokenizer)?;
        if tokenizer.ctc_vocab() != ck.config.ctc_vocab {
            return Err(Error::Checkpoint("tokenizer does not match ctc_vocab".into()));
        }
        Self::assemble(ck.config, ck.params, tokenizer, ck.norm)
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
