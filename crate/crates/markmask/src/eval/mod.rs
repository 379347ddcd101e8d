//! Quantitative evaluation: answer accuracy, rationale extractiveness and
//! compression, selective prediction, entailment consistency, markup
//! quality, and the entity-swap stress test.

mod decontext;
mod entailment;
mod perturb;
mod report;

pub use decontext::{
    decontext_quality, markup_to_inline, sari, DecontextQualityReport, InlineMode, SariScore,
};
pub use entailment::{
    entailment_rate, nli_hypothesis, CompletionNli, EntailmentItem, EntailmentReport, NliBackend,
};
pub use perturb::{
    invert_perturbation, perturb_entities, CompletionNer, Entity, EntityPool, NerBackend,
    PerturbOutcome, PerturbRecord, Substitution,
};
pub use report::{render_report, CompressionReport, EvalReport, SystemAccuracy, WellFormedReport};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MarkedPassage;
use crate::markup::fold;
use crate::par_map;
use crate::tokens::TokenCounter;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no gold answers for example {0:?}")]
    NoGolds(String),
    #[error("empty rationale: compression is undefined")]
    EmptyRationale,
    #[error("misaligned example ids: {0}")]
    Misaligned(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("backend failure: {0}")]
    Backend(#[from] crate::backends::BackendError),
}

/// Normalize an answer for scoring: case folding, punctuation removal,
/// article removal, whitespace tokenization.
pub fn normalize_answer(text: &str) -> Vec<String> {
    fold(text)
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Exact match and token-overlap F1 for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub em: bool,
    pub f1: f64,
}

impl AnswerScore {
    pub fn em01(&self) -> f64 {
        if self.em {
            1.0
        } else {
            0.0
        }
    }
}

fn token_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f1_against(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let p_counts = token_counts(pred);
    let g_counts = token_counts(gold);
    let common: usize = p_counts
        .iter()
        .filter_map(|(t, &c)| g_counts.get(t).map(|&g| c.min(g)))
        .sum();
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Score a prediction against the gold answers: EM is normalized string
/// equality with any gold; F1 is the max token-overlap F1 over golds.
/// When both sides normalize to nothing the pair counts as a match.
pub fn score_answer(pred: &str, golds: &[String]) -> AnswerScore {
    let p = normalize_answer(pred);
    let mut em = false;
    let mut f1: f64 = 0.0;
    for gold in golds {
        let g = normalize_answer(gold);
        em |= p == g;
        f1 = f1.max(f1_against(&p, &g));
    }
    AnswerScore { em, f1 }
}

/// Score many (prediction, golds) pairs, in parallel when the `parallel`
/// feature is on.
pub fn score_dataset(items: &[(String, Vec<String>)]) -> Vec<AnswerScore> {
    par_map(items, |(pred, golds)| score_answer(pred, golds))
}

fn squeeze(text: &str) -> String {
    fold(text).chars().filter(|c| c.is_alphanumeric()).collect()
}

/// A rationale is extractive when it occurs contiguously in the marked-up
/// passage, ignoring case, punctuation, and whitespace.
pub fn extractiveness(rationale: &str, marked_passage: &str) -> bool {
    squeeze(marked_passage).contains(&squeeze(rationale))
}

/// Token compression ratio of a passage relative to its rationale.
pub fn compression(
    passage: &str,
    rationale: &str,
    counter: &dyn TokenCounter,
) -> Result<f64, EvalError> {
    let r = counter.count(rationale);
    if r == 0 {
        return Err(EvalError::EmptyRationale);
    }
    Ok(counter.count(passage) as f64 / r as f64)
}

/// Compression over a result set: the headline number is the mean of
/// per-example ratios; the pooled ratio (total tokens over total tokens)
/// is reported alongside.
pub fn compression_report(
    pairs: &[(String, String)],
    counter: &dyn TokenCounter,
) -> Result<CompressionReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::LengthMismatch("no examples".into()));
    }
    let mut ratios = Vec::with_capacity(pairs.len());
    let mut passage_total = 0usize;
    let mut rationale_total = 0usize;
    for (passage, rationale) in pairs {
        ratios.push(compression(passage, rationale, counter)?);
        passage_total += counter.count(passage);
        rationale_total += counter.count(rationale);
    }
    Ok(CompressionReport {
        per_example_mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
        pooled: passage_total as f64 / rationale_total as f64,
        examples: ratios.len(),
    })
}

/// Accuracy of a subset of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
}

/// Selective prediction report: agreement between the pipeline and the
/// end-to-end system, with the end-to-end answer scored inside each
/// subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub total: usize,
    pub agree_fraction: f64,
    pub agree: Option<SubsetScore>,
    pub disagree: Option<SubsetScore>,
}

/// Compare pipeline and end-to-end answers aligned by example id.
/// Agreement is normalized string equality.
pub fn selective_report(
    pipeline: &[(String, String)],
    end_to_end: &[(String, String)],
    golds: &BTreeMap<String, Vec<String>>,
) -> Result<SelectiveReport, EvalError> {
    if pipeline.len() != end_to_end.len() {
        return Err(EvalError::Misaligned(format!(
            "{} pipeline answers vs {} end-to-end answers",
            pipeline.len(),
            end_to_end.len()
        )));
    }
    let mut agree_scores = Vec::new();
    let mut disagree_scores = Vec::new();
    for ((pid, pans), (eid, eans)) in pipeline.iter().zip(end_to_end) {
        if pid != eid {
            return Err(EvalError::Misaligned(format!("{pid:?} vs {eid:?}")));
        }
        let gold = golds
            .get(pid)
            .ok_or_else(|| EvalError::NoGolds(pid.clone()))?;
        let score = score_answer(eans, gold);
        if normalize_answer(pans) == normalize_answer(eans) {
            agree_scores.push(score);
        } else {
            disagree_scores.push(score);
        }
    }
    let total = pipeline.len();
    let subset = |scores: &[AnswerScore]| -> Option<SubsetScore> {
        if scores.is_empty() {
            return None;
        }
        Some(SubsetScore {
            count: scores.len(),
            em: scores.iter().map(AnswerScore::em01).sum::<f64>() / scores.len() as f64,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64,
        })
    };
    Ok(SelectiveReport {
        total,
        agree_fraction: if total == 0 {
            0.0
        } else {
            agree_scores.len() as f64 / total as f64
        },
        agree: subset(&agree_scores),
        disagree: subset(&disagree_scores),
    })
}

/// Well-formedness rates over annotated passages: the fraction of
/// sentences whose markup left the original text intact, and the fraction
/// of passages where every sentence did.
pub fn well_formedness(passages: &[&MarkedPassage]) -> Option<WellFormedReport> {
    let mut sentences = 0usize;
    let mut well_sentences = 0usize;
    let mut well_passages = 0usize;
    for p in passages {
        sentences += p.sentences.len();
        well_sentences += p.sentences.iter().filter(|s| s.well_formed).count();
        if p.sentences.iter().all(|s| s.well_formed) {
            well_passages += 1;
        }
    }
    if passages.is_empty() || sentences == 0 {
        return None;
    }
    Some(WellFormedReport {
        sentence_rate: well_sentences as f64 / sentences as f64,
        passage_rate: well_passages as f64 / passages.len() as f64,
        sentences,
        passages: passages.len(),
    })
}
