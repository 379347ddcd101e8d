//! The honest-student inference pipeline.
//!
//! Three stages with a hard information bottleneck: markup sees the
//! passage only (never the question), span selection sees the question
//! and the marked passage, and answer generation sees the question and
//! the selected rationale only — no other passage text. Every stage's
//! verbatim input is recorded so the bottleneck is checkable after the
//! fact, and `passage_leak`/`question_leak` implement those checks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{bounded_map, BatchProbe, CompletionBackend, CompletionRequest};
use crate::corpus::{MarkedPassage, QADataset, QAExample};
use crate::prompting::{
    answer_from_passage_input, answer_from_rationale_input, span_input, DecontextTemplate,
    PromptLabels,
};
use crate::retrieval::TokenBudget;
use crate::segment::ProtectionRules;
use crate::silver::{decontextualize_passage, DecontextSettings, SilverError};
use crate::tokens::{default_counter, TokenCounter};

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("{stage} stage failed for {example_id}: {message}")]
    Stage {
        stage: &'static str,
        example_id: String,
        message: String,
    },
    #[error("empty rationale for {0}")]
    EmptyRationale(String),
    #[error("empty answer for {0}")]
    EmptyAnswer(String),
}

/// The per-task backends of a student pipeline.
#[derive(Clone)]
pub struct StudentBackends {
    pub markup: Arc<dyn CompletionBackend>,
    pub span: Arc<dyn CompletionBackend>,
    pub rc: Arc<dyn CompletionBackend>,
    pub end_to_end: Option<Arc<dyn CompletionBackend>>,
}

/// Pipeline configuration. The default template is `None`: fine-tuned
/// markup backends consume the bare task input, while an in-context
/// backend needs the few-shot preamble.
#[derive(Clone)]
pub struct PipelineConfig {
    pub k: usize,
    pub labels: PromptLabels,
    pub template: Option<DecontextTemplate>,
    pub rules: Arc<ProtectionRules>,
    pub counter: Arc<dyn TokenCounter>,
    pub budget: usize,
    pub max_tokens: PipelineTokens,
    /// Window length for the leakage checks.
    pub leak_ngram: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTokens {
    pub markup: usize,
    pub span: usize,
    pub rc: usize,
    pub end_to_end: usize,
}

impl Default for PipelineTokens {
    fn default() -> Self {
        Self {
            markup: 256,
            span: 256,
            rc: 64,
            end_to_end: 64,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 5,
            labels: PromptLabels::default(),
            template: None,
            rules: Arc::new(ProtectionRules::default()),
            counter: default_counter(),
            budget: 1024,
            max_tokens: PipelineTokens::default(),
            leak_ngram: 10,
        }
    }
}

impl PipelineConfig {
    fn token_budget(&self) -> TokenBudget {
        TokenBudget::new(self.budget, self.counter.clone())
    }
}

/// Verbatim record of what each stage consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInputs {
    pub markup: Vec<String>,
    pub span: String,
    pub rc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_to_end: Option<String>,
}

/// One pipeline run over one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineResult {
    pub example_id: String,
    pub marked_passage: MarkedPassage,
    pub rationale: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_to_end_answer: Option<String>,
    pub stage_inputs: StageInputs,
}

/// The results-file row: the fixed external schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub example_id: String,
    pub marked_passage: String,
    pub rationale: String,
    pub answer: String,
    #[serde(default)]
    pub end_to_end_answer: Option<String>,
}

impl From<&PipelineResult> for ResultRecord {
    fn from(r: &PipelineResult) -> Self {
        Self {
            example_id: r.example_id.clone(),
            marked_passage: r.marked_passage.text.clone(),
            rationale: r.rationale.clone(),
            answer: r.answer.clone(),
            end_to_end_answer: r.end_to_end_answer.clone(),
        }
    }
}

fn first_block(completion: &str) -> &str {
    completion
        .split("\n\n")
        .next()
        .unwrap_or(completion)
        .trim()
}

/// Run the three-stage pipeline (plus the optional end-to-end baseline)
/// over one example. Any stage failure aborts the later stages.
pub fn run_pipeline(
    example: &QAExample,
    backends: &StudentBackends,
    config: &PipelineConfig,
) -> Result<PipelineResult, StudentError> {
    // Stage 1: markup. Sees the passage only.
    let budget = config.token_budget();
    let settings = DecontextSettings {
        k: config.k,
        labels: &config.labels,
        template: config.template.as_ref(),
        rules: &config.rules,
        budget: &budget,
        max_tokens: config.max_tokens.markup,
    };
    let decontext = decontextualize_passage(&example.passage, backends.markup.as_ref(), &settings)
        .map_err(|e| match e {
            SilverError::Stage { message, .. } => StudentError::Stage {
                stage: "markup",
                example_id: example.id.clone(),
                message,
            },
            other => StudentError::Stage {
                stage: "markup",
                example_id: example.id.clone(),
                message: other.to_string(),
            },
        })?;

    // Stage 2: span selection. Sees question + marked passage.
    let span_prompt = span_input(&config.labels, &example.question, &decontext.passage.text);
    let span_req = CompletionRequest::new(
        span_prompt.clone(),
        config.max_tokens.span,
        vec!["\n\n".into()],
        "span",
    );
    let span_completion =
        backends
            .span
            .complete(&span_req)
            .map_err(|e| StudentError::Stage {
                stage: "span",
                example_id: example.id.clone(),
                message: e.to_string(),
            })?;
    let rationale = first_block(&span_completion).to_string();
    if rationale.is_empty() {
        return Err(StudentError::EmptyRationale(example.id.clone()));
    }

    // Stage 3: reading comprehension. Sees question + rationale only.
    let rc_prompt = answer_from_rationale_input(&config.labels, &example.question, &rationale);
    let rc_req = CompletionRequest::new(
        rc_prompt.clone(),
        config.max_tokens.rc,
        vec!["\n\n".into()],
        "rc",
    );
    let rc_completion = backends
        .rc
        .complete(&rc_req)
        .map_err(|e| StudentError::Stage {
            stage: "rc",
            example_id: example.id.clone(),
            message: e.to_string(),
        })?;
    let answer = first_block(&rc_completion).to_string();
    if answer.is_empty() {
        return Err(StudentError::EmptyAnswer(example.id.clone()));
    }

    let (end_to_end_answer, end_to_end_input) = match &backends.end_to_end {
        Some(backend) => {
            let (a, input) = run_end_to_end(example, backend.as_ref(), config)?;
            (Some(a), Some(input))
        }
        None => (None, None),
    };

    Ok(PipelineResult {
        example_id: example.id.clone(),
        marked_passage: decontext.passage,
        rationale,
        answer,
        end_to_end_answer,
        stage_inputs: StageInputs {
            markup: decontext.prompts,
            span: span_prompt,
            rc: rc_prompt,
            end_to_end: end_to_end_input,
        },
    })
}

/// The no-rationale baseline: one call on question + full passage.
/// Returns the answer and the verbatim input.
pub fn run_end_to_end(
    example: &QAExample,
    backend: &dyn CompletionBackend,
    config: &PipelineConfig,
) -> Result<(String, String), StudentError> {
    let input = answer_from_passage_input(&config.labels, &example.question, &example.passage);
    let req = CompletionRequest::new(
        input.clone(),
        config.max_tokens.end_to_end,
        vec!["\n\n".into()],
        "end_to_end",
    );
    let completion = backend.complete(&req).map_err(|e| StudentError::Stage {
        stage: "end_to_end",
        example_id: example.id.clone(),
        message: e.to_string(),
    })?;
    let answer = first_block(&completion).to_string();
    if answer.is_empty() {
        return Err(StudentError::EmptyAnswer(example.id.clone()));
    }
    Ok((answer, input))
}

struct NoProbe;
impl BatchProbe for NoProbe {
    fn started(&self, _: usize) {}
    fn finished(&self, _: usize) {}
}

/// Run the pipeline over a dataset with bounded parallelism. Per-example
/// results keep input order; failures occupy their slot.
pub fn run_pipeline_batch(
    dataset: &QADataset,
    backends: &StudentBackends,
    config: &PipelineConfig,
    parallelism: usize,
) -> Vec<Result<PipelineResult, StudentError>> {
    bounded_map(&dataset.examples, parallelism, &NoProbe, |_, e| {
        run_pipeline(e, backends, config)
    })
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn char_windows(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len().saturating_sub(n.saturating_sub(1)))
        .map(|i| chars[i..i + n].iter().collect())
        .collect()
}

/// Bottleneck check: does the answer-stage input contain any
/// `n`-character window of the passage that the rationale does not
/// contain? Whitespace-normalized. Returns the first offending window.
pub fn passage_leak(rc_input: &str, passage: &str, rationale: &str, n: usize) -> Option<String> {
    let input = normalize_ws(rc_input);
    let passage = normalize_ws(passage);
    let rationale = normalize_ws(rationale);
    char_windows(&passage, n)
        .into_iter()
        .find(|w| input.contains(w.as_str()) && !rationale.contains(w.as_str()))
}

/// Question-blindness check: does any markup-stage input contain an
/// `n`-character window of the question that the passage does not
/// contain? Whitespace-normalized. Returns the first offending window.
pub fn question_leak(
    markup_inputs: &[String],
    question: &str,
    passage: &str,
    n: usize,
) -> Option<String> {
    let question = normalize_ws(question);
    let passage = normalize_ws(passage);
    let inputs: Vec<String> = markup_inputs.iter().map(|i| normalize_ws(i)).collect();
    char_windows(&question, n)
        .into_iter()
        .find(|w| !passage.contains(w.as_str()) && inputs.iter().any(|i| i.contains(w.as_str())))
}
