//! Speech recognition by prepending stacked conformer embeddings to a
//! decoder-only language model.
//!
//! Pipeline: [`frontend`] log-mel features → [`encoder`] conformer (CTC
//! pretrained, see [`ctc`]) → [`bridge`] frame stacking and projection →
//! [`declm`] LoRA-adapted causal LM. [`trainer`] runs both training stages and
//! [`evalsuite`] scores the result.

pub mod error;
pub mod numcore;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub mod ctc;
pub mod frontend;
pub mod nn;
pub mod encoder;
pub mod bridge;
pub mod tokenizer;
pub mod declm;
pub mod config;
pub mod checkpoint;
pub mod model;
pub mod trainer;
pub mod evalsuite;
pub mod synth;
