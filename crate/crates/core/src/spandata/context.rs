use std::ops::Range;

use super::vocab::{BOP, BOS, EOP, EOS, PAD};
use crate::error::{Error, Result};

/// Widens a span to a window of at most `max_tokens` tokens.
///
/// The spare budget is split evenly, the left side taking the floor. Budget a
/// side cannot use because it hits the document edge moves to the other side.
/// With `truncate`, a span longer than the budget is cut to its first
/// `max_tokens` tokens instead of failing.
pub fn extend_context(
    doc_len: usize,
    span: Range<usize>,
    max_tokens: usize,
    truncate: bool,
) -> Result<Range<usize>> {
    if span.start >= span.end || span.end > doc_len {
        return Err(Error::invalid(format!(
            "span {span:?} outside document of {doc_len} tokens"
        )));
    }
    let span_len = span.end - span.start;
    if span_len > max_tokens {
        if truncate {
            return Ok(span.start..span.start + max_tokens);
        }
        return Err(Error::invalid(format!(
            "span of {span_len} tokens exceeds the {max_tokens}-token window"
        )));
    }
    let budget = max_tokens - span_len;
    let want_left = budget / 2;
    let want_right = budget - want_left;
    let room_left = span.start;
    let room_right = doc_len - span.end;
    let mut left = want_left.min(room_left);
    let mut right = want_right.min(room_right);
    let mut spare = budget - left - right;
    let extra = spare.min(room_right - right);
    right += extra;
    spare -= extra;
    left += spare.min(room_left - left);
    Ok(span.start - left..span.end + right)
}

/// `[BOS] left [BOP] span [EOP] right [EOS]`, then padded with `[PAD]` or
/// truncated to `model_len` when given.
pub fn inject_markers(
    window: &[usize],
    span: Range<usize>,
    model_len: Option<usize>,
) -> Result<Vec<usize>> {
    if span.start > span.end || span.end > window.len() {
        return Err(Error::invalid(format!(
            "span {span:?} outside window of {} tokens",
            window.len()
        )));
    }
    let mut out = Vec::with_capacity(window.len() + 4);
    out.push(BOS);
    out.extend_from_slice(&window[..span.start]);
    out.push(BOP);
    out.extend_from_slice(&window[span.clone()]);
    out.push(EOP);
    out.extend_from_slice(&window[span.end..]);
    out.push(EOS);
    if let Some(n) = model_len {
        out.resize(n, PAD);
    }
    Ok(out)
}
