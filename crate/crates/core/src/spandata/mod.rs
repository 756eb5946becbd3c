//! Tokenization with character offsets, BIO span codec, context windows,
//! dataset files and synthetic corpora.

mod codec;
mod context;
mod dataset;
mod synth;
mod tokenize;
mod vocab;

use std::ops::Range;

pub use codec::{merge_ranges, spans_to_tags, tags_to_spans, Tag, TagSequence};
pub use context::{extend_context, inject_markers};
pub use dataset::{
    article_path, format_labels, load_articles, load_dataset, load_labels, load_techniques,
    parse_labels, write_articles, write_labels, write_techniques, Dataset, Span, Task,
};
pub use synth::{gen_synth, technique_names, SynthConfig, SynthCorpus};
pub use tokenize::{char_slice, is_punct, tokenize, Token, TokenizedText};
pub use vocab::{Vocab, BOP, BOS, EOP, EOS, PAD, SPECIALS, UNK};

/// Splits a document into token windows of at most `max_tokens`, breaking at
/// newlines. Lines are packed greedily; a single line longer than the limit
/// is cut into consecutive chunks.
pub fn split_windows(tt: &TokenizedText, max_tokens: usize) -> Vec<Range<usize>> {
    assert!(max_tokens > 0, "window size must be positive");
    let chars: Vec<char> = tt.text.chars().collect();
    let mut lines: Vec<Range<usize>> = Vec::new();
    let mut line_start = 0;
    for i in 0..tt.len() {
        if i > line_start {
            let gap = &chars[tt.tokens[i - 1].end..tt.tokens[i].start];
            if gap.contains(&'\n') {
                lines.push(line_start..i);
                line_start = i;
            }
        }
    }
    if line_start < tt.len() {
        lines.push(line_start..tt.len());
    }

    let mut windows: Vec<Range<usize>> = Vec::new();
    let mut cur: Option<Range<usize>> = None;
    for line in lines {
        if line.len() > max_tokens {
            if let Some(c) = cur.take() {
                windows.push(c);
            }
            let mut s = line.start;
            while s < line.end {
                let e = (s + max_tokens).min(line.end);
                windows.push(s..e);
                s = e;
            }
            continue;
        }
        cur = match cur {
            Some(c) if line.end - c.start <= max_tokens => Some(c.start..line.end),
            Some(c) => {
                windows.push(c);
                Some(line)
            }
            None => Some(line),
        };
    }
    if let Some(c) = cur {
        windows.push(c);
    }
    windows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_break_at_newlines() {
        let tt = tokenize("a b c\nd e\nf g h i\n");
        assert_eq!(split_windows(&tt, 5), vec![0..5, 5..9]);
        assert_eq!(split_windows(&tt, 100), vec![0..9]);
        assert_eq!(split_windows(&tt, 2), vec![0..2, 2..3, 3..5, 5..7, 7..9]);
    }

    #[test]
    fn windows_of_empty_text() {
        assert!(split_windows(&tokenize(""), 4).is_empty());
    }
}
