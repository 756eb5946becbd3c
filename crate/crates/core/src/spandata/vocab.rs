use std::collections::{BTreeSet, HashMap};

use super::tokenize::TokenizedText;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const BOP: usize = 4;
pub const EOP: usize = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[BOP]", "[EOP]"];

/// Word-level vocabulary; ids `0..6` are reserved for special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from token surfaces, sorted for determinism.
    pub fn build<'a>(surfaces: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = surfaces.into_iter().collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                words
                    .into_iter()
                    .filter(|w| !SPECIALS.contains(w))
                    .map(String::from),
            )
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, surface: &str) -> usize {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tt: &TokenizedText) -> Vec<usize> {
        tt.surfaces().map(|s| self.id(s)).collect()
    }
}
