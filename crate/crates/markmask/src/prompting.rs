//! Prompt linearization for the three chain stages, and parsing of the
//! completions back into structured outputs.
//!
//! The three linearizations:
//!
//! * decontextualization: instructions and five fixed exemplars, then
//!   `Context: ... Passage: ... Rewrite:` for the target sentence, with up
//!   to `k` previously rewritten sentences as context;
//! * chain-of-thought QA: ranked exemplars of
//!   `Question/Passage/Rationale/Answer`, then the target question and
//!   marked passage ending at `Rationale:`;
//! * rationale validation: ranked exemplars of `Question/Rationale/Answer`
//!   (no passages anywhere), then the target question and rationale ending
//!   at `Answer:`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retrieval::{select_exemplars, Bm25Index, RetrievalError, TokenBudget};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("empty rewrite")]
    EmptyRewrite,
    #[error("unparseable completion: missing {0:?} label")]
    MissingLabel(&'static str),
    #[error("empty completion")]
    EmptyCompletion,
    #[error(transparent)]
    Budget(#[from] RetrievalError),
}

/// The field labels used in every linearization. Configurable, but the
/// defaults are what all shipped assets and fixtures use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLabels {
    pub question: String,
    pub passage: String,
    pub rationale: String,
    pub answer: String,
    pub context: String,
    pub rewrite: String,
}

impl Default for PromptLabels {
    fn default() -> Self {
        Self {
            question: "Question:".into(),
            passage: "Passage:".into(),
            rationale: "Rationale:".into(),
            answer: "Answer:".into(),
            context: "Context:".into(),
            rewrite: "Rewrite:".into(),
        }
    }
}

impl PromptLabels {
    fn all(&self) -> [&str; 6] {
        [
            &self.question,
            &self.passage,
            &self.rationale,
            &self.answer,
            &self.context,
            &self.rewrite,
        ]
    }
}

const DEFAULT_DECONTEXT: &str = include_str!("../prompts/decontext.txt");

/// Instructions plus fixed exemplars for the decontextualization stage,
/// with a content checksum recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecontextTemplate {
    pub preamble: String,
    pub checksum: String,
}

impl DecontextTemplate {
    pub fn new(preamble: String) -> Self {
        let checksum = sha256_hex(preamble.as_bytes());
        Self { preamble, checksum }
    }

    pub fn from_file(path: &std::path::Path) -> std::io::Result<Self> {
        Ok(Self::new(std::fs::read_to_string(path)?))
    }
}

impl Default for DecontextTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_DECONTEXT.to_string())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The target section of a decontextualization prompt. Also the input
/// format of the student markup task.
pub fn linearize_decontext(labels: &PromptLabels, context: &[String], sentence: &str) -> String {
    let ctx = context.join(" ");
    format!(
        "{} {}\n{} {}\n{}",
        labels.context,
        ctx,
        labels.passage,
        sentence,
        labels.rewrite
    )
}

/// Build the prompt for one sentence. `context` holds all previously
/// decontextualized sentences, oldest first; only the most recent `k` are
/// used, and fewer when needed to stay within the budget. Errors when the
/// sentence alone does not fit.
pub fn build_decontext_prompt(
    template: Option<&DecontextTemplate>,
    labels: &PromptLabels,
    context: &[String],
    sentence: &str,
    k: usize,
    budget: Option<&TokenBudget>,
) -> Result<String, PromptError> {
    let start = context.len().saturating_sub(k);
    let mut window = &context[start..];
    loop {
        let target = linearize_decontext(labels, window, sentence);
        let prompt = match template {
            Some(t) => format!("{}\n\n{}", t.preamble.trim_end(), target),
            None => target,
        };
        match budget {
            Some(b) if b.count(&prompt) > b.limit => {
                if window.is_empty() {
                    return Err(RetrievalError::InstanceOverBudget {
                        fixed: b.count(&prompt),
                        limit: b.limit,
                    }
                    .into());
                }
                window = &window[1..]; // drop the oldest context sentence
            }
            _ => return Ok(prompt),
        }
    }
}

/// Cut a completion at the first blank line that is followed by a known
/// label, the stop convention for all stages.
fn cut_at_stop<'a>(completion: &'a str, labels: &PromptLabels) -> &'a str {
    let mut offset = 0;
    while let Some(nl) = completion[offset..].find('\n') {
        let line_end = offset + nl;
        let rest = &completion[line_end + 1..];
        let (next_line, after) = match rest.find('\n') {
            Some(p) => (&rest[..p], &rest[p + 1..]),
            None => (rest, ""),
        };
        if next_line.trim().is_empty() {
            let upcoming = after.trim_start();
            if labels.all().iter().any(|l| upcoming.starts_with(l)) {
                return &completion[..line_end];
            }
        }
        offset = line_end + 1;
    }
    completion
}

/// Extract the rewritten sentence from a decontextualization completion.
pub fn parse_rewrite(completion: &str, labels: &PromptLabels) -> Result<String, PromptError> {
    let text = cut_at_stop(completion, labels).trim();
    if text.is_empty() {
        return Err(PromptError::EmptyRewrite);
    }
    Ok(text.to_string())
}

/// One chain-of-thought exemplar: a solved instance shown before the
/// target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotExemplar {
    pub question: String,
    pub passage: String,
    pub rationale: String,
    pub answer: String,
}

fn cot_exemplar_block(labels: &PromptLabels, ex: &CotExemplar) -> String {
    format!(
        "{} {}\n{} {}\n{} {}\n{} {}",
        labels.question,
        ex.question,
        labels.passage,
        ex.passage,
        labels.rationale,
        ex.rationale,
        labels.answer,
        ex.answer
    )
}

/// `Question:/Passage:/Rationale:` linearization: the chain-of-thought
/// target section, and the input format of the span-selection task.
pub fn span_input(labels: &PromptLabels, question: &str, marked_passage: &str) -> String {
    format!(
        "{} {}\n{} {}\n{}",
        labels.question,
        question,
        labels.passage,
        marked_passage,
        labels.rationale
    )
}

/// `Question:/Rationale:/Answer:` linearization: the validation target
/// section, and the input format of the rationale reading-comprehension
/// task.
pub fn answer_from_rationale_input(labels: &PromptLabels, question: &str, rationale: &str) -> String {
    format!(
        "{} {}\n{} {}\n{}",
        labels.question,
        question,
        labels.rationale,
        rationale,
        labels.answer
    )
}

/// `Question:/Passage:/Answer:` linearization: the input format of the
/// end-to-end task. Question first, always.
pub fn answer_from_passage_input(labels: &PromptLabels, question: &str, passage: &str) -> String {
    format!(
        "{} {}\n{} {}\n{}",
        labels.question,
        question,
        labels.passage,
        passage,
        labels.answer
    )
}

/// A finished prompt with its exemplar count and token cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub text: String,
    pub exemplars_used: usize,
    pub tokens: usize,
}

fn assemble(
    blocks: &[String],
    target: &str,
    budget: &TokenBudget,
) -> Result<BuiltPrompt, PromptError> {
    let mut taken = select_exemplars(blocks, target, budget)?;
    // The greedy pass counts blocks separately; re-check the assembled
    // prompt so the emitted text can never exceed the limit.
    loop {
        let text = if taken == 0 {
            target.to_string()
        } else {
            format!("{}\n\n{}", blocks[..taken].join("\n\n"), target)
        };
        let tokens = budget.count(&text);
        if tokens <= budget.limit || taken == 0 {
            if tokens > budget.limit {
                return Err(RetrievalError::InstanceOverBudget {
                    fixed: tokens,
                    limit: budget.limit,
                }
                .into());
            }
            return Ok(BuiltPrompt {
                text,
                exemplars_used: taken,
                tokens,
            });
        }
        taken -= 1;
    }
}

/// Build a chain-of-thought prompt from ranked exemplars (most similar
/// first), greedily filling the token budget.
pub fn build_cot_prompt(
    exemplars: &[&CotExemplar],
    question: &str,
    marked_passage: &str,
    labels: &PromptLabels,
    budget: &TokenBudget,
) -> Result<BuiltPrompt, PromptError> {
    let blocks: Vec<String> = exemplars
        .iter()
        .map(|e| cot_exemplar_block(labels, e))
        .collect();
    let target = span_input(labels, question, marked_passage);
    assemble(&blocks, &target, budget)
}

/// Split a chain-of-thought completion into (rationale, answer). The
/// answer is preserved verbatim apart from surrounding whitespace.
pub fn parse_cot(completion: &str, labels: &PromptLabels) -> Result<(String, String), PromptError> {
    let text = cut_at_stop(completion, labels);
    let text = text
        .trim_start()
        .strip_prefix(labels.rationale.as_str())
        .unwrap_or(text);
    let answer_pos = text
        .find(&format!("\n{}", labels.answer))
        .map(|p| (p, p + 1 + labels.answer.len()))
        .or_else(|| {
            text.trim_start()
                .starts_with(labels.answer.as_str())
                .then(|| (0, text.find(&labels.answer).unwrap() + labels.answer.len()))
        })
        .ok_or(PromptError::MissingLabel("Answer:"))?;
    let rationale = text[..answer_pos.0].trim().to_string();
    let answer = text[answer_pos.1..].trim().to_string();
    if answer.is_empty() {
        return Err(PromptError::MissingLabel("Answer:"));
    }
    Ok((rationale, answer))
}

/// One validation exemplar: question, rationale, answer. No passages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationExemplar {
    pub question: String,
    pub rationale: String,
    pub answer: String,
}

fn validation_exemplar_block(labels: &PromptLabels, ex: &ValidationExemplar) -> String {
    format!(
        "{} {}\n{} {}\n{} {}",
        labels.question,
        ex.question,
        labels.rationale,
        ex.rationale,
        labels.answer,
        ex.answer
    )
}

/// Build a rationale-validation prompt from ranked exemplars. The
/// rationale replaces the passage: no passage text appears anywhere.
pub fn build_validation_prompt(
    exemplars: &[&ValidationExemplar],
    question: &str,
    rationale: &str,
    labels: &PromptLabels,
    budget: &TokenBudget,
) -> Result<BuiltPrompt, PromptError> {
    let blocks: Vec<String> = exemplars
        .iter()
        .map(|e| validation_exemplar_block(labels, e))
        .collect();
    let target = answer_from_rationale_input(labels, question, rationale);
    assemble(&blocks, &target, budget)
}

/// Extract the answer from a validation completion: the first block,
/// trimmed.
pub fn parse_validation(completion: &str, labels: &PromptLabels) -> Result<String, PromptError> {
    let text = cut_at_stop(completion, labels).trim();
    let text = text.strip_prefix(labels.answer.as_str()).unwrap_or(text).trim();
    if text.is_empty() {
        return Err(PromptError::EmptyCompletion);
    }
    Ok(text.to_string())
}

/// A sentence in both its surface forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceForms {
    pub original: String,
    pub marked: Option<String>,
}

/// Pick an exemplar rationale: among all sentence forms containing a gold
/// answer as a case-sensitive substring, the one most similar to the
/// question under BM25. Ties go to the earliest candidate (original form
/// before marked form). `None` when no form contains an answer.
pub fn make_exemplar_rationale(
    question: &str,
    sentences: &[SentenceForms],
    gold_answers: &[String],
) -> Option<String> {
    let mut candidates: Vec<&str> = Vec::new();
    for s in sentences {
        candidates.push(&s.original);
        if let Some(marked) = &s.marked {
            if marked != &s.original {
                candidates.push(marked);
            }
        }
    }
    let matching: Vec<&str> = candidates
        .into_iter()
        .filter(|c| gold_answers.iter().any(|g| !g.is_empty() && c.contains(g.as_str())))
        .collect();
    if matching.is_empty() {
        return None;
    }
    let docs: Vec<String> = matching.iter().map(|s| s.to_string()).collect();
    let index = Bm25Index::with_defaults(&docs);
    let best = index.top_k(question, 1)[0].0;
    Some(matching[best].to_string())
}
