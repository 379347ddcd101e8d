//! BM25 ranking over training questions and budgeted exemplar selection.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::par_map;
use crate::tokens::TokenCounter;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("instance over budget: fixed prompt parts cost {fixed} tokens, limit {limit}")]
    InstanceOverBudget { fixed: usize, limit: usize },
}

/// Lowercase alphanumeric tokenization shared by index and queries.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Immutable Okapi BM25 index. Safe to query concurrently.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    df: HashMap<String, usize>,
    avgdl: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn build(docs: &[String], k1: f64, b: f64) -> Self {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let tokens = tokenize(doc);
            doc_lens.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for term in tf.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
            term_freqs.push(tf);
        }
        let avgdl = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        Self {
            term_freqs,
            doc_lens,
            df,
            avgdl,
            k1,
            b,
        }
    }

    pub fn with_defaults(docs: &[String]) -> Self {
        Self::build(docs, DEFAULT_K1, DEFAULT_B)
    }

    pub fn len(&self) -> usize {
        self.term_freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term_freqs.is_empty()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    /// Robertson/Sparck-Jones idf, clamped at zero so very common terms
    /// never score negatively.
    fn idf(&self, term: &str) -> f64 {
        let n = self.term_freqs.len() as f64;
        let df = self.doc_freq(term) as f64;
        (((n - df + 0.5) / (df + 0.5)).ln()).max(0.0)
    }

    /// BM25 score of one document for a query. Query terms are deduplicated.
    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let mut terms = tokenize(query);
        terms.sort_unstable();
        terms.dedup();
        let tf = &self.term_freqs[doc];
        let dl = self.doc_lens[doc] as f64;
        let norm = if self.avgdl > 0.0 { dl / self.avgdl } else { 0.0 };
        let score: f64 = terms
            .iter()
            .filter_map(|t| {
                let f = *tf.get(t)? as f64;
                let num = f * (self.k1 + 1.0);
                let den = f + self.k1 * (1.0 - self.b + self.b * norm);
                Some(self.idf(t) * num / den)
            })
            .sum();
        // An empty sum is -0.0, which total_cmp orders below +0.0; keep
        // zero scores canonical so tie-breaking stays purely by doc id.
        score + 0.0
    }

    /// Top-k documents by descending score; ties broken by ascending
    /// document id, so rankings are fully deterministic.
    pub fn top_k(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|d| (d, self.score(query, d)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    /// Rank many queries, in parallel when the `parallel` feature is on.
    pub fn top_k_batch(&self, queries: &[String], k: usize) -> Vec<Vec<(usize, f64)>> {
        par_map(queries, |q| self.top_k(q, k))
    }
}

/// Whether the budget covers the whole prompt or the exemplar section
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetScope {
    Full,
    ExemplarsOnly,
}

/// A prompt token budget with its counter.
#[derive(Clone)]
pub struct TokenBudget {
    pub limit: usize,
    pub counter: Arc<dyn TokenCounter>,
    pub scope: BudgetScope,
}

impl TokenBudget {
    pub fn new(limit: usize, counter: Arc<dyn TokenCounter>) -> Self {
        Self {
            limit,
            counter,
            scope: BudgetScope::Full,
        }
    }

    pub fn count(&self, text: &str) -> usize {
        self.counter.count(text)
    }
}

impl std::fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenBudget")
            .field("limit", &self.limit)
            .field("scope", &self.scope)
            .field("counter", &self.counter.name())
            .finish()
    }
}

/// Greedy prefix selection: walk the ranked blocks in order and stop at
/// the first one that would push the running total (including the fixed
/// scaffold-plus-instance cost, under `BudgetScope::Full`) past the
/// limit. Returns how many blocks were taken.
pub fn select_exemplars(
    blocks: &[String],
    fixed: &str,
    budget: &TokenBudget,
) -> Result<usize, RetrievalError> {
    let fixed_cost = match budget.scope {
        BudgetScope::Full => budget.count(fixed),
        BudgetScope::ExemplarsOnly => 0,
    };
    if fixed_cost > budget.limit {
        return Err(RetrievalError::InstanceOverBudget {
            fixed: fixed_cost,
            limit: budget.limit,
        });
    }
    let mut total = fixed_cost;
    let mut taken = 0;
    for block in blocks {
        let cost = budget.count(block);
        if total + cost > budget.limit {
            break;
        }
        total += cost;
        taken += 1;
    }
    Ok(taken)
}
