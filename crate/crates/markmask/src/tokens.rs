//! Pluggable token counting.
//!
//! Prompt budgets are denominated in the serving model's subword units,
//! which differ per model. The default counter approximates a subword
//! tokenizer with a greedy longest-prefix match over a small shipped
//! vocabulary; the trait lets callers substitute the exact tokenizer of
//! whatever model is behind the completion endpoint.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

/// Counts tokens in a piece of text. Implementations must be deterministic.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
    /// Short identifier recorded in run manifests.
    fn name(&self) -> &str;
}

/// Greedy longest-prefix subword counter over a fixed vocabulary.
///
/// Words are lowercased and split on whitespace; each word is consumed
/// piece by piece, taking the longest vocabulary entry that prefixes the
/// remainder, falling back to a single character. Counts are additive
/// across whitespace-joined blocks, which the prompt budget logic relies
/// on.
pub struct SubwordCounter {
    vocab: HashSet<String>,
    max_piece: usize,
    name: String,
}

const DEFAULT_VOCAB: &str = include_str!("../assets/counter_vocab.txt");

impl SubwordCounter {
    pub fn new(vocab_lines: &str, name: &str) -> Self {
        let vocab: HashSet<String> = vocab_lines
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        let max_piece = vocab.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Self {
            vocab,
            max_piece,
            name: name.to_string(),
        }
    }

    fn count_word(&self, word: &str) -> usize {
        let chars: Vec<char> = word.chars().collect();
        let mut i = 0;
        let mut pieces = 0;
        while i < chars.len() {
            let mut matched = 1;
            let upper = self.max_piece.min(chars.len() - i);
            for len in (1..=upper).rev() {
                let piece: String = chars[i..i + len].iter().collect();
                if self.vocab.contains(&piece) {
                    matched = len;
                    break;
                }
            }
            pieces += 1;
            i += matched;
        }
        pieces
    }
}

impl Default for SubwordCounter {
    fn default() -> Self {
        Self::new(DEFAULT_VOCAB, "subword-approx-v1")
    }
}

impl TokenCounter for SubwordCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace()
            .map(|w| self.count_word(&w.to_lowercase()))
            .sum()
    }

    fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for SubwordCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubwordCounter")
            .field("name", &self.name)
            .field("vocab_size", &self.vocab.len())
            .finish()
    }
}

/// Shared handle to the default counter.
pub fn default_counter() -> Arc<dyn TokenCounter> {
    Arc::new(SubwordCounter::default())
}
