//! Synthetic tone corpora: every character is a sine burst at its own
//! frequency, separated by short silences. Small enough to overfit, with
//! exact transcripts.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frontend::{write_wav, Waveform};
use crate::trainer::{write_manifest, ManifestEntry};

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz '";

/// Eight distinct transcripts, one per report language.
pub const OVERFIT_SET: [(&str, &str); 8] = [
    ("hello world", "en"),
    ("good morning", "de"),
    ("see you soon", "nl"),
    ("the cat sat", "fr"),
    ("big red fox", "es"),
    ("jump high", "it"),
    ("quick brown", "pt"),
    ("lazy dog", "pl"),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToneSpec {
    pub sample_rate: u32,
    pub char_ms: f64,
    pub gap_ms: f64,
    pub base_hz: f64,
    pub step_hz: f64,
    pub amplitude: f64,
}

impl Default for ToneSpec {
    fn default() -> Self {
        ToneSpec {
            sample_rate: 16000,
            char_ms: 200.0,
            gap_ms: 40.0,
            base_hz: 300.0,
            step_hz: 110.0,
            amplitude: 0.3,
        }
    }
}

impl ToneSpec {
    pub fn frequency(&self, c: char) -> Option<f64> {
        ALPHABET.chars().position(|a| a == c).map(|i| self.base_hz + self.step_hz * i as f64)
    }

    pub fn synthesize(&self, text: &str) -> Result<Waveform> {
        let sr = self.sample_rate as f64;
        let tone = (self.char_ms * sr / 1000.0).round() as usize;
        let gap = (self.gap_ms * sr / 1000.0).round() as usize;
        let ramp = (0.005 * sr) as usize;
        let mut samples = vec![0.0f32; gap];
        for c in text.chars() {
            let hz = self
                .frequency(c)
                .ok_or_else(|| Error::Input(format!("character {c:?} has no tone")))?;
            for i in 0..tone {
                let edge = i.min(tone - 1 - i).min(ramp) as f64 / ramp as f64;
                samples.push((self.amplitude * edge * (TAU * hz * i as f64 / sr).sin()) as f32);
            }
            samples.extend(std::iter::repeat_n(0.0, gap));
        }
        Ok(Waveform {
            samples,
            sample_rate: self.sample_rate,
        })
    }
}

/// Write one wav per utterance plus `manifest.jsonl`; returns the manifest path.
pub fn write_corpus(dir: &Path, utterances: &[(&str, &str)], spec: &ToneSpec) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(utterances.len());
    for (i, (text, lang)) in utterances.iter().enumerate() {
        let name = format!("utt{i:03}.wav");
        write_wav(&dir.join(&name), &spec.synthesize(text)?)?;
        entries.push(ManifestEntry {
            audio_path: PathBuf::from(name),
            text: text.to_string(),
            language: lang.to_string(),
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_and_distinct_tones() {
        let s = ToneSpec::default();
        let w = s.synthesize("ab").unwrap();
        assert_eq!(w.samples.len(), 640 + 2 * (3200 + 640));
        let f: Vec<f64> = ALPHABET.chars().map(|c| s.frequency(c).unwrap()).collect();
        assert!(f.windows(2).all(|p| p[1] > p[0]));
        assert!(*f.last().unwrap() < 8000.0);
        assert!(s.synthesize("é").is_err());
    }
}
