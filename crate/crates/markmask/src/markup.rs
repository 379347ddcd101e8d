//! The bracketed decontextualization markup grammar.
//!
//! Marked text is plain UTF-8 in which free-text insertions appear in
//! square brackets: `The grieving goddess [Astarte] revived Eshmun.`
//! Each span owns the single space that precedes its opening bracket, so
//! stripping a span deletes the bracket pair, its content, and that one
//! space. Under this convention stripping well-formed markup reproduces
//! the original text character-wise (case-insensitive), which is exactly
//! the well-formedness check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{self, ProtectionRules, SegmentError};
use crate::tokens::TokenCounter;

/// Escape for a literal `[` occurring in source passages before markup.
pub const ESCAPED_OPEN: char = '\u{E001}';
/// Escape for a literal `]` occurring in source passages before markup.
pub const ESCAPED_CLOSE: char = '\u{E002}';

#[derive(Debug, Error)]
pub enum MarkupError {
    #[error("unbalanced bracket at char offset {0}")]
    Unbalanced(usize),
    #[error("nested bracket at char offset {0}")]
    Nested(usize),
    #[error("empty markup span at char offset {0}")]
    EmptySpan(usize),
    #[error("span content contains a bracket: {0:?}")]
    BracketInContent(String),
    #[error("span offset {offset} exceeds plain text length {len}")]
    OffsetOutOfRange { offset: usize, len: usize },
    #[error("spans are not sorted by insertion offset")]
    UnsortedSpans,
    #[error("input already contains bracket escape codepoints")]
    EscapeCollision,
    #[error("no passages given")]
    EmptyInput,
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

/// A markup insertion: `content` appears bracketed after char offset
/// `insert_after` of the plain text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkupSpan {
    pub insert_after: usize,
    pub content: String,
}

/// Plain text plus its markup insertions, sorted by offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedText {
    pub plain: String,
    pub spans: Vec<MarkupSpan>,
}

/// Parse marked surface text into plain text and spans.
///
/// Every maximal `[ ... ]` region becomes one span; the single space
/// before each opening bracket (when present) is attributed to the span
/// and removed from the plain residue.
pub fn parse_marked(marked: &str) -> Result<MarkedText, MarkupError> {
    let mut plain = String::new();
    let mut plain_len = 0usize; // chars
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;

    for (offset, ch) in marked.chars().enumerate() {
        match &mut open {
            Some((open_offset, content)) => match ch {
                '[' => return Err(MarkupError::Nested(offset)),
                ']' => {
                    if content.is_empty() {
                        return Err(MarkupError::EmptySpan(*open_offset));
                    }
                    spans.push(MarkupSpan {
                        insert_after: plain_len,
                        content: std::mem::take(content),
                    });
                    open = None;
                }
                _ => content.push(ch),
            },
            None => match ch {
                '[' => {
                    if plain.ends_with(' ') {
                        plain.pop();
                        plain_len -= 1;
                    }
                    open = Some((offset, String::new()));
                }
                ']' => return Err(MarkupError::Unbalanced(offset)),
                _ => {
                    plain.push(ch);
                    plain_len += 1;
                }
            },
        }
    }
    if let Some((open_offset, _)) = open {
        return Err(MarkupError::Unbalanced(open_offset));
    }
    Ok(MarkedText { plain, spans })
}

/// Render plain text and spans back to the bracketed surface form.
/// Inverse of [`parse_marked`]: the result re-parses to the same value.
pub fn render(m: &MarkedText) -> Result<String, MarkupError> {
    let plain_len = m.plain.chars().count();
    let mut prev = 0usize;
    for span in &m.spans {
        if span.content.is_empty() {
            return Err(MarkupError::EmptySpan(span.insert_after));
        }
        if span.content.contains('[') || span.content.contains(']') {
            return Err(MarkupError::BracketInContent(span.content.clone()));
        }
        if span.insert_after > plain_len {
            return Err(MarkupError::OffsetOutOfRange {
                offset: span.insert_after,
                len: plain_len,
            });
        }
        if span.insert_after < prev {
            return Err(MarkupError::UnsortedSpans);
        }
        prev = span.insert_after;
    }

    let mut out = String::with_capacity(m.plain.len() + m.spans.len() * 8);
    let mut span_iter = m.spans.iter().peekable();
    for (pos, ch) in m.plain.chars().enumerate() {
        while span_iter.peek().is_some_and(|s| s.insert_after == pos) {
            let span = span_iter.next().unwrap();
            out.push_str(" [");
            out.push_str(&span.content);
            out.push(']');
        }
        out.push(ch);
    }
    for span in span_iter {
        out.push_str(" [");
        out.push_str(&span.content);
        out.push(']');
    }
    Ok(out)
}

/// Remove all markup, returning the plain residue.
pub fn strip(marked: &str) -> Result<String, MarkupError> {
    parse_marked(marked).map(|m| m.plain)
}

/// Full Unicode case folding, used for all case-insensitive comparisons.
pub fn fold(text: &str) -> String {
    caseless::default_case_fold_str(text)
}

/// Outcome of a well-formedness check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WellFormedness {
    pub well_formed: bool,
    pub diagnostic: Option<String>,
}

/// Markup is well-formed iff it parses and stripping it reproduces the
/// original text character-wise after case folding.
pub fn is_well_formed(marked: &str, original: &str) -> WellFormedness {
    let parsed = match parse_marked(marked) {
        Ok(p) => p,
        Err(e) => {
            return WellFormedness {
                well_formed: false,
                diagnostic: Some(format!("markup does not parse: {e}")),
            }
        }
    };
    let stripped = fold(&parsed.plain);
    let reference = fold(original);
    if stripped == reference {
        WellFormedness {
            well_formed: true,
            diagnostic: None,
        }
    } else {
        let at = stripped
            .chars()
            .zip(reference.chars())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| stripped.chars().count().min(reference.chars().count()));
        WellFormedness {
            well_formed: false,
            diagnostic: Some(format!(
                "stripped text diverges from original at folded char {at}"
            )),
        }
    }
}

/// Replace literal brackets in a source passage with private-use escapes
/// so the markup grammar stays unambiguous. Undone by
/// [`unescape_brackets`].
pub fn escape_brackets(text: &str) -> Result<String, MarkupError> {
    if text.contains(ESCAPED_OPEN) || text.contains(ESCAPED_CLOSE) {
        return Err(MarkupError::EscapeCollision);
    }
    Ok(text
        .replace('[', &ESCAPED_OPEN.to_string())
        .replace(']', &ESCAPED_CLOSE.to_string()))
}

pub fn unescape_brackets(text: &str) -> String {
    text.replace(ESCAPED_OPEN, "[").replace(ESCAPED_CLOSE, "]")
}

/// Aggregate statistics of markup density, in the shape used for
/// reporting: spans per sentence, tokens per span (mean and median),
/// spans per document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkupStats {
    pub documents: usize,
    pub sentences: usize,
    pub spans: usize,
    pub spans_per_sentence: f64,
    pub spans_per_document: f64,
    pub tokens_per_span_mean: Option<f64>,
    pub tokens_per_span_median: Option<f64>,
}

pub fn markup_stats(
    passages: &[MarkedText],
    rules: &ProtectionRules,
    counter: &dyn TokenCounter,
) -> Result<MarkupStats, MarkupError> {
    if passages.is_empty() {
        return Err(MarkupError::EmptyInput);
    }
    let mut sentences = 0usize;
    let mut span_tokens: Vec<usize> = Vec::new();
    for p in passages {
        sentences += segment::segment(&p.plain, rules)?.len();
        span_tokens.extend(p.spans.iter().map(|s| counter.count(&s.content)));
    }
    let spans = span_tokens.len();
    let (mean, median) = if spans == 0 {
        (None, None)
    } else {
        let mean = span_tokens.iter().sum::<usize>() as f64 / spans as f64;
        let mut sorted = span_tokens.clone();
        sorted.sort_unstable();
        let median = if spans % 2 == 1 {
            sorted[spans / 2] as f64
        } else {
            (sorted[spans / 2 - 1] + sorted[spans / 2]) as f64 / 2.0
        };
        (Some(mean), Some(median))
    };
    Ok(MarkupStats {
        documents: passages.len(),
        sentences,
        spans,
        spans_per_sentence: if sentences == 0 {
            0.0
        } else {
            spans as f64 / sentences as f64
        },
        spans_per_document: spans as f64 / passages.len() as f64,
        tokens_per_span_mean: mean,
        tokens_per_span_median: median,
    })
}
