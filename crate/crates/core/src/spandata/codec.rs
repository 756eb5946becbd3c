//! BIO encoding of character spans over tokens, and the lenient inverse.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::dataset::Span;
use super::tokenize::TokenizedText;
use crate::crf::{TAG_B, TAG_I, TAG_O};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    O,
    B,
    I,
}

impl Tag {
    pub fn id(self) -> usize {
        match self {
            Tag::O => TAG_O,
            Tag::B => TAG_B,
            Tag::I => TAG_I,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            TAG_O => Ok(Tag::O),
            TAG_B => Ok(Tag::B),
            TAG_I => Ok(Tag::I),
            _ => Err(Error::invalid(format!("no BIO tag with id {id}"))),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::O => "O",
            Tag::B => "B",
            Tag::I => "I",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.id()).collect()
    }

    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        ids.iter()
            .map(|&i| Tag::from_id(i))
            .collect::<Result<_>>()
            .map(TagSequence)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for TagSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(Tag::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Union of overlapping or touching-free character ranges, sorted.
pub fn merge_ranges(mut ranges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    ranges.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
    for (s, e) in ranges {
        match out.last_mut() {
            Some(last) if s < last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Tags every token whose character range intersects a (merged) span.
/// Annotations cutting through a token therefore snap outward to it.
pub fn spans_to_tags(tt: &TokenizedText, spans: &[Span]) -> Result<TagSequence> {
    for s in spans {
        if s.start >= s.end || s.end > tt.char_len() {
            return Err(Error::SpanBounds {
                article: s.article_id.clone(),
                start: s.start,
                end: s.end,
                len: tt.char_len(),
            });
        }
    }
    let merged = merge_ranges(spans.iter().map(|s| (s.start, s.end)).collect());
    let mut inside = vec![false; tt.len()];
    for (s, e) in merged {
        for i in tt.tokens_overlapping(s, e) {
            inside[i] = true;
        }
    }
    let tags = inside
        .iter()
        .enumerate()
        .map(|(i, &on)| match (on, i > 0 && inside[i - 1]) {
            (false, _) => Tag::O,
            (true, false) => Tag::B,
            (true, true) => Tag::I,
        })
        .collect();
    Ok(TagSequence(tags))
}

/// Each maximal run of B/I tokens becomes one span; a `B` starts a new run
/// and an `I` after `O` is read as `B`.
pub fn tags_to_spans(
    tt: &TokenizedText,
    tags: &TagSequence,
    article_id: &str,
) -> Result<Vec<Span>> {
    if tags.len() != tt.len() {
        return Err(Error::shape(format!(
            "{} tags for {} tokens",
            tags.len(),
            tt.len()
        )));
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (tok, &tag) in tt.tokens.iter().zip(&tags.0) {
        match (tag, open.as_mut()) {
            (Tag::O, _) => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(article_id, s, e));
                }
            }
            (Tag::I, Some(run)) => run.1 = tok.end,
            (Tag::B, _) | (Tag::I, None) => {
                if let Some((s, e)) = open.take() {
                    spans.push(Span::new(article_id, s, e));
                }
                open = Some((tok.start, tok.end));
            }
        }
    }
    if let Some((s, e)) = open {
        spans.push(Span::new(article_id, s, e));
    }
    Ok(spans)
}
