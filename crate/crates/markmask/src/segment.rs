//! Sentence segmentation with reversible abbreviation protection.
//!
//! Splitting happens in two phases. First, data-driven protection rules
//! replace the separating spaces of abbreviation patterns (initials
//! chains, honorifics) with a private-use placeholder so the splitter
//! cannot break inside them; every replacement is recorded as an edit and
//! is fully reversible. Second, a rule-based splitter finds boundaries at
//! sentence-final punctuation followed by whitespace and a capital, digit,
//! or opening quote. Sentence offsets always refer to the original text,
//! so the placeholder never leaks into output.

use std::fmt;

use regex::Regex;
use thiserror::Error;

/// Non-splitting placeholder. Private-use so it cannot occur in real text;
/// inputs containing it are rejected.
pub const PLACEHOLDER: char = '\u{E000}';

const DEFAULT_RULES: &str = include_str!("../assets/protection_rules.tsv");
const MAX_PASSES: usize = 32;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("input contains the reserved placeholder character U+E000 at char offset {0}")]
    PlaceholderInInput(usize),
    #[error("bad protection rule on line {line}: {message}")]
    BadRule { line: usize, message: String },
}

/// A sentence of the original text. `start`/`end` are char offsets and
/// `text` is exactly the original slice between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One protection replacement, recorded so it can be undone. `position`
/// is a char offset into the text as it was at application time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtectionEdit {
    pub position: usize,
    pub original: String,
    pub replacement: String,
}

struct ProtectionRule {
    pattern: Regex,
    replacement: String,
}

/// Ordered list of pattern -> replacement rules.
pub struct ProtectionRules {
    rules: Vec<ProtectionRule>,
}

impl ProtectionRules {
    /// Parse rules from the `pattern<TAB>replacement` line format.
    pub fn parse(text: &str) -> Result<Self, SegmentError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let (pat, rep) = raw.split_once('\t').ok_or_else(|| SegmentError::BadRule {
                line,
                message: "missing tab separator".into(),
            })?;
            let pattern = Regex::new(pat).map_err(|e| SegmentError::BadRule {
                line,
                message: e.to_string(),
            })?;
            let replacement = unescape(rep).map_err(|message| SegmentError::BadRule { line, message })?;
            rules.push(ProtectionRule {
                pattern,
                replacement,
            });
        }
        Ok(Self { rules })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, SegmentError> {
        let text = std::fs::read_to_string(path).map_err(|e| SegmentError::BadRule {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl Default for ProtectionRules {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("shipped protection rules must parse")
    }
}

impl fmt::Debug for ProtectionRules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ProtectionRules({} rules)", self.rules.len())
    }
}

/// Expand `\t`, `\\` and `\u{XXXX}` escapes in a rule replacement.
fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some('u') => {
                if chars.next() != Some('{') {
                    return Err("expected '{' after \\u".into());
                }
                let mut hex = String::new();
                for c in chars.by_ref() {
                    if c == '}' {
                        break;
                    }
                    hex.push(c);
                }
                let cp = u32::from_str_radix(&hex, 16).map_err(|e| format!("bad \\u escape: {e}"))?;
                out.push(char::from_u32(cp).ok_or_else(|| format!("invalid codepoint {hex}"))?);
            }
            other => return Err(format!("unknown escape \\{:?}", other)),
        }
    }
    Ok(out)
}

fn check_no_placeholder(text: &str) -> Result<(), SegmentError> {
    if let Some(pos) = text.chars().position(|c| c == PLACEHOLDER) {
        return Err(SegmentError::PlaceholderInInput(pos));
    }
    Ok(())
}

fn char_to_byte(s: &str, char_pos: usize) -> usize {
    s.char_indices()
        .nth(char_pos)
        .map(|(b, _)| b)
        .unwrap_or(s.len())
}

/// Apply all protection rules to a fixpoint, recording every replacement.
pub fn protect(
    text: &str,
    rules: &ProtectionRules,
) -> Result<(String, Vec<ProtectionEdit>), SegmentError> {
    check_no_placeholder(text)?;
    let mut current = text.to_string();
    let mut edits = Vec::new();
    for _ in 0..MAX_PASSES {
        let mut changed = false;
        for rule in &rules.rules {
            let mut search_from = 0usize; // byte offset
            loop {
                let found = rule.pattern.captures_at(&current, search_from).map(|caps| {
                    let m = caps.get(0).expect("whole-match group");
                    let mut expanded = String::new();
                    caps.expand(&rule.replacement, &mut expanded);
                    let char_pos = current[..m.start()].chars().count();
                    (m.range(), m.as_str().to_string(), expanded, char_pos)
                });
                let (range, matched, expanded, char_pos) = match found {
                    Some(f) => f,
                    None => break,
                };
                if matched.is_empty() {
                    // Zero-width match: nothing to protect, step forward.
                    search_from = current[range.start..]
                        .chars()
                        .next()
                        .map(|c| range.start + c.len_utf8())
                        .unwrap_or(current.len());
                    if search_from >= current.len() {
                        break;
                    }
                    continue;
                }
                edits.push(ProtectionEdit {
                    position: char_pos,
                    original: matched,
                    replacement: expanded.clone(),
                });
                let next_from = range.start + expanded.len();
                current.replace_range(range, &expanded);
                search_from = next_from.min(current.len());
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok((current, edits))
}

/// Undo `protect`: applies the recorded edits in reverse order.
pub fn revert(protected: &str, edits: &[ProtectionEdit]) -> String {
    let mut current = protected.to_string();
    for edit in edits.iter().rev() {
        let start = char_to_byte(&current, edit.position);
        let end = start + edit.replacement.len();
        debug_assert_eq!(&current[start..end], edit.replacement);
        current.replace_range(start..end, &edit.original);
    }
    current
}

/// Map a char offset in the protected text back to the original text.
fn map_to_original(edits: &[ProtectionEdit], pos: usize) -> usize {
    let mut pos = pos;
    for edit in edits.iter().rev() {
        let lr = edit.replacement.chars().count();
        let lo = edit.original.chars().count();
        if pos >= edit.position + lr {
            pos = pos - lr + lo;
        } else if pos > edit.position {
            pos = edit.position + (pos - edit.position).min(lo);
        }
    }
    pos
}

const CLOSERS: &[char] = &['"', '\'', '\u{201d}', '\u{2019}', ')'];
const OPENERS: &[char] = &['"', '\'', '\u{201c}', '\u{2018}', '('];

fn is_terminal(c: char) -> bool {
    c == '.' || c == '!' || c == '?'
}

/// True when the period at `dot` ends a single-capital initial like "R.",
/// which never terminates a sentence.
fn is_initial_abbrev(chars: &[char], dot: usize) -> bool {
    if chars[dot] != '.' || dot == 0 {
        return false;
    }
    let last = chars[dot - 1];
    if !last.is_uppercase() || !last.is_alphabetic() {
        return false;
    }
    // The capital must be a whole word: preceded by start or non-alphanumeric.
    dot < 2 || !chars[dot - 2].is_alphanumeric()
}

/// Split text into sentences. Protection edits are applied internally and
/// fully reverted: offsets and texts refer to the original input.
pub fn segment(text: &str, rules: &ProtectionRules) -> Result<Vec<Sentence>, SegmentError> {
    let (protected, edits) = protect(text, rules)?;
    let chars: Vec<char> = protected.chars().collect();
    let n = chars.len();

    let mut starts = Vec::new(); // (start, end) in protected char offsets
    let first = match chars.iter().position(|c| !c.is_whitespace()) {
        Some(p) => p,
        None => return Ok(Vec::new()),
    };
    let last_non_ws = n - chars.iter().rev().position(|c| !c.is_whitespace()).unwrap();

    let mut cur_start = first;
    let mut i = first;
    while i < last_non_ws {
        if is_terminal(chars[i]) && !is_initial_abbrev(&chars, i) {
            // Closing quotes/brackets stay with the finished sentence.
            let mut end = i + 1;
            while end < n && CLOSERS.contains(&chars[end]) {
                end += 1;
            }
            let mut next = end;
            while next < n && chars[next].is_whitespace() {
                next += 1;
            }
            let splits = next > end
                && next < n
                && (chars[next].is_uppercase()
                    || chars[next].is_numeric()
                    || OPENERS.contains(&chars[next]));
            if splits {
                starts.push((cur_start, end));
                cur_start = next;
                i = next;
                continue;
            }
        }
        i += 1;
    }
    if cur_start < last_non_ws {
        starts.push((cur_start, last_non_ws));
    }

    let orig_chars: Vec<char> = text.chars().collect();
    let sentences = starts
        .into_iter()
        .enumerate()
        .map(|(index, (s, e))| {
            let start = map_to_original(&edits, s);
            let end = map_to_original(&edits, e).max(start);
            Sentence {
                index,
                text: orig_chars[start..end].iter().collect(),
                start,
                end,
            }
        })
        .collect();
    Ok(sentences)
}
