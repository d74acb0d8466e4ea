use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const TURN_OF_SPEECH: u32 = 1;
pub const FILLING: u32 = 2;
const NUM_SPECIALS: u32 = 3;

/// Default character inventory; 43 symbols plus the three specials.
pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,'?!-";

/// Token ids over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTokens {
    pub ids: Vec<u32>,
    pub vocab_size: usize,
}

impl TextTokens {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids, vocab_size })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Character-level tokenizer with reserved PAD / turn-of-speech / filling ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    alphabet: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHABET).expect("default alphabet is valid")
    }
}

impl Tokenizer {
    pub fn new(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() || chars.len() > 64 {
            return Err(Error::InvalidArgument(format!(
                "alphabet must hold 1..=64 symbols, got {}",
                chars.len()
            )));
        }
        let mut seen = chars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != chars.len() {
            return Err(Error::InvalidArgument("alphabet has duplicate symbols".into()));
        }
        Ok(Self { alphabet: chars })
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + NUM_SPECIALS as usize
    }

    pub fn symbol_id(&self, c: char) -> Option<u32> {
        self.alphabet
            .iter()
            .position(|&a| a == c)
            .map(|p| p as u32 + NUM_SPECIALS)
    }

    /// Lower-cases input; unknown characters are an error.
    pub fn encode(&self, text: &str) -> Result<TextTokens> {
        let ids = text
            .to_lowercase()
            .chars()
            .map(|c| {
                self.symbol_id(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("character {c:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        TextTokens::new(ids, self.vocab_size())
    }

    /// Specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_SPECIALS)
            .filter_map(|&id| self.alphabet.get((id - NUM_SPECIALS) as usize))
            .collect()
    }
}
