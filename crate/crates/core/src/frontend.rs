//! Audio ingestion and 80-d log-mel filterbank features at a 10 ms hop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub max_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            n_mels: 80,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-10,
            max_seconds: 20.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < self.win_length || self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::Config(
                "frontend: need n_fft >= win_length, hop_length > 0, n_mels > 0".into(),
            ));
        }
        if !(self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "frontend: mel range {}..{} Hz invalid for {} Hz audio",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Mono samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a RIFF/WAVE PCM16 file, average channels to mono and resample to the
/// configured rate. Utterances over `max_seconds` are rejected.
pub fn load_audio(path: &Path, cfg: &FrontendConfig) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let wave = decode_wav(BufReader::new(file), cfg).map_err(|e| match e {
        Error::Input(reason) => Error::Audio {
            path: path.to_path_buf(),
            reason,
        },
        Error::TooLong { seconds, limit, .. } => Error::TooLong {
            path: path.to_path_buf(),
            seconds,
            limit,
        },
        other => other,
    })?;
    Ok(wave)
}

pub fn decode_wav<R: Read>(reader: R, cfg: &FrontendConfig) -> Result<Waveform> {
    let mut wav = hound::WavReader::new(reader).map_err(|e| Error::Input(format!("malformed WAVE: {e}")))?;
    let spec = wav.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Input(format!(
            "unsupported codec: {:?} {}-bit (need PCM16)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = wav
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Input(format!("truncated or corrupt PCM data: {e}")))?;
    let mono: Vec<f32> = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f32 / 32768.0).sum::<f32>() / frame.len() as f32)
        .collect();
    let samples = if spec.sample_rate == cfg.sample_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate, cfg.sample_rate)
    };
    let wave = Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    };
    let seconds = wave.duration_seconds();
    if seconds > cfg.max_seconds {
        return Err(Error::TooLong {
            path: Default::default(),
            seconds,
            limit: cfg.max_seconds,
        });
    }
    Ok(wave)
}

/// Linear-interpolation resampler; output length is round(n · to / from).
pub fn resample(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let n_out = ((samples.len() as f64) * to as f64 / from as f64).round() as usize;
    let ratio = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = (pos - j as f64) as f32;
            let a = samples[j.min(samples.len() - 1)];
            let b = samples[(j + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Write mono float samples as PCM16.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| Error::Audio {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    w.finalize().map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// T × n_mels log-mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor<f32>,
}

impl FeatureMatrix {
    pub const HOP_MS: usize = 10;
    pub const WINDOW_MS: usize = 25;

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// T = 1 + ⌊(n − window) / hop⌋, or 0 when the audio is shorter than a window.
pub fn num_frames(num_samples: usize, win_length: usize, hop_length: usize) -> usize {
    if num_samples < win_length {
        0
    } else {
        1 + (num_samples - win_length) / hop_length
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, evaluated at FFT bin centres.
/// Returns n_mels rows of n_fft/2+1 weights.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f32>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (left, centre, right) = (lo + m as f64 * step, lo + (m + 1) as f64 * step, lo + (m + 2) as f64 * step);
            bin_mel
                .iter()
                .map(|&b| {
                    if b > left && b < right {
                        let w = if b <= centre {
                            (b - left) / (centre - left)
                        } else {
                            (right - b) / (right - centre)
                        };
                        w as f32
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub struct MelFrontend {
    cfg: FrontendConfig,
    window: Vec<f32>,
    filters: Vec<Vec<f32>>,
    fft: Arc<dyn Fft<f32>>,
}

impl MelFrontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
            .collect();
        Ok(MelFrontend {
            cfg: cfg.clone(),
            window,
            filters: mel_filterbank(cfg),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Unnormalized log-mel energies: Hann window → FFT power → mel → ln(max(·, floor)).
    pub fn log_mel(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        let cfg = &self.cfg;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::Input(format!(
                "expected {} Hz audio, got {}",
                cfg.sample_rate, wave.sample_rate
            )));
        }
        let t = num_frames(wave.samples.len(), cfg.win_length, cfg.hop_length);
        if t == 0 {
            return Err(Error::Input(format!(
                "{} samples is shorter than one {}-sample window",
                wave.samples.len(),
                cfg.win_length
            )));
        }
        let n_bins = cfg.n_fft / 2 + 1;
        let floor = cfg.log_floor as f32;
        let mut out = Vec::with_capacity(t * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f32; n_bins];
        for f in 0..t {
            let start = f * cfg.hop_length;
            let frame = &wave.samples[start..start + cfg.win_length];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < frame.len() {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f32 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push(e.max(floor).ln());
            }
        }
        Ok(FeatureMatrix {
            frames: Tensor::new(&[t, cfg.n_mels], out)?,
        })
    }

    /// Log-mel features, normalized when `stats` are given.
    pub fn features(&self, wave: &Waveform, stats: Option<&NormStats>) -> Result<FeatureMatrix> {
        let mut f = self.log_mel(wave)?;
        if let Some(s) = stats {
            s.apply(&mut f)?;
        }
        Ok(f)
    }

    pub fn features_batch(&self, waves: &[Waveform], stats: Option<&NormStats>) -> Vec<Result<FeatureMatrix>> {
        par::map(waves, |w| self.features(w, stats))
    }
}

/// Per-dimension mean and standard deviation over a training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

const STD_FLOOR: f64 = 1e-5;

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn compute(features: &[FeatureMatrix]) -> Result<Self> {
        let dim = features
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| Error::Input("no features to compute statistics from".into()))?;
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut n = 0usize;
        for f in features {
            if f.dim() != dim {
                return Err(Error::shape("norm_stats", format!("{} vs {dim} dims", f.dim())));
            }
            for r in 0..f.num_frames() {
                for (j, &v) in f.frames.row(r).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / nf - m * m).max(0.0).sqrt().max(STD_FLOOR)) as f32)
            .collect();
        Ok(NormStats {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, f: &mut FeatureMatrix) -> Result<()> {
        let d = f.dim();
        if d != self.mean.len() {
            return Err(Error::shape("norm_stats", format!("{d} vs {} dims", self.mean.len())));
        }
        for row in f.frames.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"SLFT";
const FEATURE_VERSION: u32 = 1;

/// Flat dump: magic, version, T, D (u32 LE), then row-major f32 LE.
pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    for v in [FEATURE_VERSION, f.num_frames() as u32, f.dim() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in f.frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |why: &str| Error::Audio {
        path: path.to_path_buf(),
        reason: format!("feature dump: {why}"),
    };
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != FEATURE_VERSION {
        return Err(bad("unsupported version"));
    }
    let (t, d) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 16 + 4 * t * d {
        return Err(bad("length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        frames: Tensor::new(&[t, d], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, amp: f32) -> Waveform {
        let n = (seconds * 16000.0) as usize;
        Waveform {
            samples: (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32)
                .collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn one_second_gives_98_frames() {
        let fe = MelFrontend::new(&FrontendConfig::default()).unwrap();
        let f = fe.log_mel(&tone(440.0, 1.0, 0.3)).unwrap();
        assert_eq!((f.num_frames(), f.dim()), (98, 80));
        assert!(f.frames.all_finite());
    }

    #[test]
    fn frame_count_formula_holds() {
        let fe = MelFrontend::new(&FrontendConfig::default()).unwrap();
        for n in [400, 401, 559, 560, 561, 1234, 4000] {
            let w = Waveform { samples: vec![0.01; n], sample_rate: 16000 };
            assert_eq!(fe.log_mel(&w).unwrap().num_frames(), 1 + (n - 400) / 160);
        }
        let short = Waveform { samples: vec![0.0; 399], sample_rate: 16000 };
        assert!(fe.log_mel(&short).is_err());
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let fe = MelFrontend::new(&FrontendConfig::default()).unwrap();
        let w = Waveform { samples: vec![0.0; 16000], sample_rate: 16000 };
        let f = fe.log_mel(&w).unwrap();
        let floor = (1e-10f64 as f32).ln();
        assert!(f.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_in_the_covering_bin() {
        let cfg = FrontendConfig::default();
        let fe = MelFrontend::new(&cfg).unwrap();
        let f = fe.log_mel(&tone(1000.0, 0.5, 0.5)).unwrap();
        let arg: Vec<usize> = (0..f.num_frames())
            .map(|r| crate::numcore::kernels::argmax(f.frames.row(r)))
            .collect();
        assert!(arg.iter().all(|&a| a == arg[0]));
        let fb = mel_filterbank(&cfg);
        let bin = (1000.0 * cfg.n_fft as f64 / 16000.0).round() as usize;
        assert!(fb[arg[0]][bin] > 0.0, "filter {} does not cover 1 kHz", arg[0]);
        let scaled = fe.log_mel(&tone(1000.0, 0.5, 0.05)).unwrap();
        for r in 0..f.num_frames() {
            assert_eq!(crate::numcore::kernels::argmax(scaled.frames.row(r)), arg[r]);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let fe = MelFrontend::new(&FrontendConfig::default()).unwrap();
        let w = tone(300.0, 0.7, 0.2);
        assert_eq!(fe.log_mel(&w).unwrap(), fe.log_mel(&w).unwrap());
    }

    #[test]
    fn resample_preserves_duration() {
        let x: Vec<f32> = (0..44_100).map(|i| (i as f32 * 0.01).sin()).collect();
        let y = resample(&x, 44_100, 16_000);
        let d_in = x.len() as f64 / 44_100.0;
        let d_out = y.len() as f64 / 16_000.0;
        assert!((d_in - d_out).abs() <= 1.0 / 16_000.0);
    }

    #[test]
    fn normalization_centres_each_dim() {
        let fe = MelFrontend::new(&FrontendConfig::default()).unwrap();
        let feats = vec![
            fe.log_mel(&tone(500.0, 0.5, 0.3)).unwrap(),
            fe.log_mel(&tone(2000.0, 0.5, 0.1)).unwrap(),
        ];
        let stats = NormStats::compute(&feats).unwrap();
        let mut all = feats.clone();
        all.iter_mut().for_each(|f| stats.apply(f).unwrap());
        let again = NormStats::compute(&all).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-3));
    }
}
