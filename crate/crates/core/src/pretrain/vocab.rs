//! Vocabulary and the deterministic tokenizer.
//!
//! Storage format: plain UTF-8, one token per line, line number = id.  The
//! first four lines must be the special tokens, in order.  Tokenization is
//! lower-cased alphanumeric runs with every other non-whitespace character as
//! its own single-character token, so specials (which contain `<`/`>`) can
//! never be produced from raw text.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// The required first four vocabulary entries.
pub const SPECIALS: [&str; 4] = ["<pad>", "<mask>", "<unk>", "<sep>"];

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
/// Ids below this are special and never maskable.
pub const NUM_SPECIALS: u32 = 4;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from id-ordered tokens, checking the invariants:
    /// specials first, no duplicates, no empty or padded entries.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < SPECIALS.len() + 1 {
            return Err(Error::Vocab(format!(
                "vocabulary has {} entries; need the {} specials plus content",
                tokens.len(),
                SPECIALS.len()
            )));
        }
        for (i, want) in SPECIALS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Vocab(format!(
                    "line {} must be the special token '{want}', found '{}'",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.trim() != t {
                return Err(Error::Vocab(format!(
                    "line {}: token '{t}' is empty or has surrounding whitespace",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("line {}: duplicate token '{t}'", i + 1)));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Loads the one-token-per-line format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned))
    }

    /// Writes the one-token-per-line format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.tokens.len() * 8);
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lower-cases, splits into alphanumeric runs and single punctuation
    /// characters, and maps each piece to its id (unknowns to `<unk>`).
    /// Total: never fails, empty input gives an empty sequence.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut word = String::new();
        let flush = |word: &mut String, ids: &mut Vec<u32>| {
            if !word.is_empty() {
                ids.push(self.id(word).unwrap_or(UNK_ID));
                word.clear();
            }
        };
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                flush(&mut word, &mut ids);
                if !ch.is_whitespace() {
                    ids.push(self.id(&ch.to_string()).unwrap_or(UNK_ID));
                }
            }
        }
        flush(&mut word, &mut ids);
        ids
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// A small vocabulary for unit tests: specials plus lowercase words.
    pub(crate) fn mini_vocab() -> Vocab {
        let words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", ".", "fish"];
        Vocab::from_tokens(SPECIALS.iter().copied().chain(words)).unwrap()
    }
}
