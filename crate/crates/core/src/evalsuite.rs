//! Word error rate, per-language reports and audio/text alignment analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::SpeechModel;
use crate::numcore::kernels::dot;
use crate::numcore::Tensor;
use crate::par;
use crate::tokenizer::normalize;
use crate::trainer::{utterance_id, ManifestEntry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Minimum-edit alignment split into substitutions, deletions and insertions.
pub fn align_words(reference: &[&str], hypothesis: &[&str]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = EditCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            if reference[i - 1] != hypothesis[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub wer: f64,
    pub counts: EditCounts,
}

/// WER over whitespace-separated words of the given strings.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerResult> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Input("WER is undefined for an empty reference".into()));
    }
    let counts = align_words(&r, &h);
    Ok(WerResult {
        wer: counts.errors() as f64 / counts.ref_words as f64,
        counts,
    })
}

/// WER after lowercasing and stripping punctuation other than apostrophes.
pub fn normalized_wer(reference: &str, hypothesis: &str) -> Result<WerResult> {
    wer(&normalize(reference), &normalize(hypothesis))
}

pub trait Transcriber: Sync {
    fn transcribe(&self, entry: &ManifestEntry) -> Result<String>;
}

/// Greedy decoding with a trained model.
pub struct ModelTranscriber<'a> {
    pub model: &'a SpeechModel,
    pub max_len: usize,
}

impl Transcriber for ModelTranscriber<'_> {
    fn transcribe(&self, entry: &ManifestEntry) -> Result<String> {
        let f = self.model.file_features(&entry.audio_path)?;
        self.model.transcribe(&f, self.max_len)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub wer: f64,
    pub utterances: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub audio_path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_language: BTreeMap<String, LanguageScore>,
    /// Unweighted mean of the per-language WERs.
    pub average: f64,
    pub decode_config_digest: String,
    pub skipped: Vec<Skip>,
}

/// Digest identifying how hypotheses were produced.
pub fn decode_digest(model_digest: &str, max_len: usize) -> String {
    let v = serde_json::json!({
        "model": model_digest,
        "search": "greedy",
        "max_decode_len": max_len,
        "normalization": "lowercase, strip punctuation except apostrophes",
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Decode every entry, aggregate edit counts per language. Failures are
/// recorded as skips and excluded from the counts.
pub fn eval_corpus(entries: &[ManifestEntry], transcriber: &dyn Transcriber, decode_config_digest: &str) -> Result<EvalReport> {
    let hyps = par::map(entries, |e| transcriber.transcribe(e));
    let mut counts: BTreeMap<String, (usize, EditCounts)> = BTreeMap::new();
    let mut skipped = Vec::new();
    for (e, hyp) in entries.iter().zip(hyps) {
        match hyp {
            Ok(h) => {
                let r = normalized_wer(&e.text, &h)?;
                let slot = counts.entry(e.language.clone()).or_default();
                slot.0 += 1;
                slot.1.add(&r.counts);
            }
            Err(err) => skipped.push(Skip {
                audio_path: e.audio_path.clone(),
                reason: err.to_string(),
            }),
        }
    }
    let per_language: BTreeMap<String, LanguageScore> = counts
        .into_iter()
        .map(|(lang, (n, c))| {
            let score = LanguageScore {
                wer: c.errors() as f64 / c.ref_words as f64,
                utterances: n,
                substitutions: c.substitutions,
                deletions: c.deletions,
                insertions: c.insertions,
                ref_words: c.ref_words,
            };
            (lang, score)
        })
        .collect();
    let average = if per_language.is_empty() {
        f64::NAN
    } else {
        per_language.values().map(|s| s.wer).sum::<f64>() / per_language.len() as f64
    };
    Ok(EvalReport {
        per_language,
        average,
        decode_config_digest: decode_config_digest.to_string(),
        skipped,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one column per language in `columns` order, then Avg (WER in %).
    pub fn to_table(&self, columns: &[String]) -> String {
        let mut header = format!("{:<6}", "");
        let mut row = format!("{:<6}", "WER");
        for lang in columns {
            write!(header, "{lang:>7}").unwrap();
            match self.per_language.get(lang) {
                Some(s) => write!(row, "{:>7.1}", 100.0 * s.wer).unwrap(),
                None => write!(row, "{:>7}", "-").unwrap(),
            }
        }
        write!(header, "{:>7}", "Avg").unwrap();
        write!(row, "{:>7.1}", 100.0 * self.average).unwrap();
        format!("{header}\n{row}\n")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major cosine similarities.
    pub values: Vec<f64>,
    pub utterance: String,
    pub stride_ms: usize,
}

impl AlignmentMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// cos(a_i, b_j) for every row pair; a zero vector gives 0.
pub fn cosine_matrix(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_matrix", format!("widths {} vs {}", a.cols(), b.cols())));
    }
    let widen = |t: &Tensor<f32>| -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
    };
    let (a, b) = (widen(a), widen(b));
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let bn: Vec<f64> = b.iter().map(|v| norm(v)).collect();
    let mut out = Vec::with_capacity(a.len() * b.len());
    for ai in &a {
        let an = norm(ai);
        for (bj, &bnj) in b.iter().zip(&bn) {
            let c = if an == 0.0 || bnj == 0.0 {
                0.0
            } else {
                (dot(ai, bj) / (an * bnj)).clamp(-1.0, 1.0)
            };
            out.push(c);
        }
    }
    Ok(out)
}

/// Bridge outputs against LM input embeddings of the reference characters.
pub fn alignment_matrix(model: &SpeechModel, features: &Tensor<f32>, text: &str, utterance: &str) -> Result<AlignmentMatrix> {
    let audio = model.audio_embeddings(features)?;
    let ids = model.tokenizer.encode(&normalize(text));
    if ids.is_empty() {
        return Err(Error::Input("alignment needs a non-empty reference".into()));
    }
    let table = model.params.get(crate::declm::TOK_EMB)?;
    let d = table.cols();
    let rows: Vec<f32> = ids.iter().flat_map(|&i| table.row(i).to_vec()).collect();
    let text_emb = Tensor::new(&[ids.len(), d], rows)?;
    Ok(AlignmentMatrix {
        rows: audio.rows(),
        cols: ids.len(),
        values: cosine_matrix(&audio, &text_emb)?,
        utterance: utterance.to_string(),
        stride_ms: model.embedding_ms().unwrap_or(0),
    })
}

/// Alignment for a manifest entry.
pub fn alignment_for_entry(model: &SpeechModel, entry: &ManifestEntry) -> Result<AlignmentMatrix> {
    let f = model.file_features(&entry.audio_path)?;
    alignment_matrix(model, &f, &entry.text, &utterance_id(&entry.audio_path))
}

/// Share of consecutive audio rows whose best-matching text column does not move backwards.
pub fn monotonicity(m: &AlignmentMatrix) -> f64 {
    if m.rows < 2 || m.cols == 0 {
        return 1.0;
    }
    let best: Vec<usize> = (0..m.rows)
        .map(|i| crate::numcore::kernels::argmax(&m.values[i * m.cols..(i + 1) * m.cols]))
        .collect();
    let ok = best.windows(2).filter(|w| w[1] >= w[0]).count();
    ok as f64 / (m.rows - 1) as f64
}

pub fn to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Writes `<stem>.csv` (row-major, 6 decimals) and `<stem>.pgm` (8-bit, [-1, 1] → [0, 255]).
pub fn export_heatmap(m: &AlignmentMatrix, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");
    let mut csv = String::new();
    for i in 0..m.rows {
        let row: Vec<String> = (0..m.cols).map(|j| format!("{:.6}", m.get(i, j))).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;
    let mut pgm = format!("P5\n{} {}\n255\n", m.cols, m.rows).into_bytes();
    pgm.extend(m.values.iter().map(|&v| to_pixel(v)));
    std::fs::write(&pgm_path, pgm)?;
    Ok((csv_path, pgm_path))
}

/// Rows of comma-separated values.
pub fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}

/// (width, height, pixels) of a binary 8-bit PGM.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let bad = || Error::Input(format!("{}: not an 8-bit P5 PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos..).ok_or_else(bad)?.to_vec();
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}
