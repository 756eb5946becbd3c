use serde::{Deserialize, Serialize};

/// One token with character (not byte) offsets into the source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub text: String,
    pub tokens: Vec<Token>,
    char_len: usize,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Length of the text in characters.
    pub fn char_len(&self) -> usize {
        self.char_len
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    /// Index of the first token whose end lies past `char_pos`.
    pub fn token_at_or_after(&self, char_pos: usize) -> usize {
        self.tokens.partition_point(|t| t.end <= char_pos)
    }

    /// Token index range whose character ranges intersect `[start, end)`.
    pub fn tokens_overlapping(&self, start: usize, end: usize) -> std::ops::Range<usize> {
        let lo = self.token_at_or_after(start);
        let hi = self.tokens.partition_point(|t| t.start < end);
        lo..hi.max(lo)
    }
}

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
        )
}

/// Splits on whitespace; each punctuation character becomes its own token.
pub fn tokenize(text: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let mut pos = 0;
    let flush = |word: &mut String, start: usize, end: usize, tokens: &mut Vec<Token>| {
        if !word.is_empty() {
            tokens.push(Token {
                surface: std::mem::take(word),
                start,
                end,
            });
        }
    };
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, word_start, pos, &mut tokens);
        } else if is_punct(c) {
            flush(&mut word, word_start, pos, &mut tokens);
            tokens.push(Token {
                surface: c.to_string(),
                start: pos,
                end: pos + 1,
            });
        } else {
            if word.is_empty() {
                word_start = pos;
            }
            word.push(c);
        }
        pos += 1;
    }
    flush(&mut word, word_start, pos, &mut tokens);
    TokenizedText {
        text: text.to_string(),
        tokens,
        char_len: pos,
    }
}

/// Substring by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut idx = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()));
    let b0 = idx.nth(start).unwrap_or(text.len());
    let b1 = if end > start {
        idx.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b0
    };
    &text[b0..b1]
}
