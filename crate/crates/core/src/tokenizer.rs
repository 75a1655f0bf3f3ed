//! Character tokenizer with reserved special ids, plus the shared text normalizer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub bos: usize,
    pub eos: usize,
}

pub const SPECIALS: SpecialIds = SpecialIds {
    pad: 0,
    unk: 1,
    bos: 2,
    eos: 3,
};
const NUM_SPECIALS: usize = 4;

/// Lowercase, drop punctuation other than apostrophes, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// LM ids: specials first, then one id per character. CTC ids: 1-based
/// character index (0 is the blank).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    chars: Vec<char>,
}

impl Tokenizer {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        Tokenizer {
            chars: set.into_iter().collect(),
        }
    }

    pub fn from_table(table: &[String]) -> Result<Self> {
        let mut chars = Vec::with_capacity(table.len());
        for entry in table {
            let mut it = entry.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(Error::Checkpoint(format!("bad tokenizer entry {entry:?}"))),
            }
        }
        Ok(Tokenizer { chars })
    }

    pub fn table(&self) -> Vec<String> {
        self.chars.iter().map(|c| c.to_string()).collect()
    }

    pub fn specials(&self) -> SpecialIds {
        SPECIALS
    }

    pub fn lm_vocab_size(&self) -> usize {
        NUM_SPECIALS + self.chars.len()
    }

    /// Number of non-blank CTC symbols.
    pub fn ctc_vocab(&self) -> usize {
        self.chars.len()
    }

    fn index(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    /// LM ids; unknown characters map to unk.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.index(c).map_or(SPECIALS.unk, |i| i + NUM_SPECIALS))
            .collect()
    }

    /// Text from LM ids; specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.chars.get(id - NUM_SPECIALS))
            .collect()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn ctc_labels(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index(c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Input(format!("character {c:?} not in CTC vocabulary")))
            })
            .collect()
    }

    pub fn ctc_decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter_map(|&l| l.checked_sub(1).and_then(|i| self.chars.get(i)))
            .collect()
    }
}
