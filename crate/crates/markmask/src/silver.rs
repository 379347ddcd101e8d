//! The three-stage teacher chain over a dataset, silver filtering, and
//! export of the four student training tasks.
//!
//! Stage 1 decontextualizes each passage sentence by sentence,
//! autoregressively: the prompt for sentence `t` carries the previous `k`
//! decontextualized sentences as context. Markup is question-neutral, so
//! a passage shared by several questions is annotated once. Stage 2 asks
//! for a rationale and answer given the question and marked passage;
//! stage 3 re-answers from the rationale alone. Records survive filtering
//! only when both answers score at least the threshold against gold.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    bounded_map, complete_batch, BatchProbe, CompletionBackend, CompletionRequest,
};
use crate::corpus::{
    self, CorpusError, MarkedPassage, MarkedSentence, QADataset, QAExample, SilverRecord,
};
use crate::eval::score_answer;
use crate::markup::{self, MarkupError};
use crate::prompting::{
    answer_from_passage_input, answer_from_rationale_input, build_cot_prompt,
    build_decontext_prompt, build_validation_prompt, linearize_decontext, make_exemplar_rationale,
    parse_cot, parse_rewrite, parse_validation, sha256_hex, span_input, CotExemplar,
    DecontextTemplate, PromptError, PromptLabels, SentenceForms, ValidationExemplar,
};
use crate::retrieval::{Bm25Index, BudgetScope, TokenBudget};
use crate::segment::{ProtectionRules, SegmentError};
use crate::tokens::{default_counter, TokenCounter};

#[derive(Debug, Error)]
pub enum SilverError {
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Markup(#[from] MarkupError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl SilverError {
    fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

/// Per-stage completion lengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTokens {
    pub decontext: usize,
    pub cot: usize,
    pub validate: usize,
}

impl Default for StageTokens {
    fn default() -> Self {
        Self {
            decontext: 256,
            cot: 384,
            validate: 64,
        }
    }
}

/// Configuration of a chain run. Defaults: context window 5, budget 1024
/// tokens, filter threshold 0.5.
#[derive(Clone)]
pub struct ChainConfig {
    pub k: usize,
    pub budget: usize,
    pub budget_scope: BudgetScope,
    pub threshold: f64,
    pub parallelism: usize,
    pub seed: u64,
    pub labels: PromptLabels,
    pub template: DecontextTemplate,
    pub rules: Arc<ProtectionRules>,
    pub counter: Arc<dyn TokenCounter>,
    pub max_tokens: StageTokens,
    /// Restrict the end-to-end task export to kept records instead of the
    /// whole dataset.
    pub end_to_end_kept_only: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            budget: 1024,
            budget_scope: BudgetScope::Full,
            threshold: 0.5,
            parallelism: 4,
            seed: 0,
            labels: PromptLabels::default(),
            template: DecontextTemplate::default(),
            rules: Arc::new(ProtectionRules::default()),
            counter: default_counter(),
            max_tokens: StageTokens::default(),
            end_to_end_kept_only: false,
        }
    }
}

impl ChainConfig {
    pub fn token_budget(&self) -> TokenBudget {
        TokenBudget {
            limit: self.budget,
            counter: self.counter.clone(),
            scope: self.budget_scope,
        }
    }

    /// Digest of the semantically relevant settings, for manifests.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            k: usize,
            budget: usize,
            scope: &'a str,
            threshold: f64,
            labels: &'a PromptLabels,
            max_tokens: &'a StageTokens,
            end_to_end_kept_only: bool,
            seed: u64,
        }
        let summary = Summary {
            k: self.k,
            budget: self.budget,
            scope: match self.budget_scope {
                BudgetScope::Full => "full",
                BudgetScope::ExemplarsOnly => "exemplars-only",
            },
            threshold: self.threshold,
            labels: &self.labels,
            max_tokens: &self.max_tokens,
            end_to_end_kept_only: self.end_to_end_kept_only,
            seed: self.seed,
        };
        sha256_hex(
            serde_json::to_string(&summary)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Settings for one decontextualization loop.
pub struct DecontextSettings<'a> {
    pub k: usize,
    pub labels: &'a PromptLabels,
    /// Few-shot preamble; `None` for fine-tuned backends that consume the
    /// bare task input.
    pub template: Option<&'a DecontextTemplate>,
    pub rules: &'a ProtectionRules,
    pub budget: &'a TokenBudget,
    pub max_tokens: usize,
}

/// A decontextualized passage plus the verbatim prompts that produced it.
#[derive(Debug, Clone)]
pub struct DecontextRun {
    pub passage: MarkedPassage,
    pub prompts: Vec<String>,
}

/// Annotate one passage, sentence by sentence. A backend failure or empty
/// rewrite fails the whole passage; a rewrite with broken markup keeps
/// the original sentence and is flagged ill-formed.
pub fn decontextualize_passage(
    passage: &str,
    backend: &dyn CompletionBackend,
    settings: &DecontextSettings,
) -> Result<DecontextRun, SilverError> {
    let escaped = passage.contains('[') || passage.contains(']');
    let work = if escaped {
        markup::escape_brackets(passage)?
    } else {
        passage.to_string()
    };
    let sentences = crate::segment::segment(&work, settings.rules)?;

    let mut context: Vec<String> = Vec::new();
    let mut marked_sentences: Vec<MarkedSentence> = Vec::new();
    let mut prompts: Vec<String> = Vec::new();
    for sentence in &sentences {
        let prompt = build_decontext_prompt(
            settings.template,
            settings.labels,
            &context,
            &sentence.text,
            settings.k,
            Some(settings.budget),
        )?;
        let req = CompletionRequest::new(
            prompt.clone(),
            settings.max_tokens,
            vec!["\n\n".into()],
            "decontext",
        );
        let completion = backend
            .complete(&req)
            .map_err(|e| SilverError::stage("decontext", e))?;
        let rewrite = parse_rewrite(&completion, settings.labels)
            .map_err(|e| SilverError::stage("decontext", e))?;
        let (used, well_formed) = match markup::parse_marked(&rewrite) {
            Ok(_) => {
                let wf = markup::is_well_formed(&rewrite, &sentence.text).well_formed;
                (rewrite, wf)
            }
            // Unparseable markup cannot be merged; fall back to the
            // original sentence and record the failure.
            Err(_) => (sentence.text.clone(), false),
        };
        prompts.push(prompt);
        context.push(used.clone());
        marked_sentences.push(MarkedSentence {
            original: sentence.text.clone(),
            marked: used,
            well_formed,
        });
    }

    // Merge: the original passage with each sentence replaced by its
    // marked form, inter-sentence gaps preserved.
    let work_chars: Vec<char> = work.chars().collect();
    let mut merged = String::new();
    let mut cursor = 0usize;
    for (sentence, marked) in sentences.iter().zip(&marked_sentences) {
        merged.extend(&work_chars[cursor..sentence.start]);
        merged.push_str(&marked.marked);
        cursor = sentence.end;
    }
    merged.extend(&work_chars[cursor..]);

    let passage = if escaped {
        MarkedPassage {
            text: markup::unescape_brackets(&merged),
            sentences: marked_sentences
                .into_iter()
                .map(|s| MarkedSentence {
                    original: markup::unescape_brackets(&s.original),
                    marked: markup::unescape_brackets(&s.marked),
                    well_formed: s.well_formed,
                })
                .collect(),
        }
    } else {
        MarkedPassage {
            text: merged,
            sentences: marked_sentences,
        }
    };
    Ok(DecontextRun { passage, prompts })
}

/// Stage-1 output for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkedRecord {
    pub example_id: String,
    pub passage: MarkedPassage,
}

/// An example dropped from the chain, with the failing stage and reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dropped {
    pub example_id: String,
    pub stage: String,
    pub reason: String,
}

struct NoProbe;
impl BatchProbe for NoProbe {
    fn started(&self, _: usize) {}
    fn finished(&self, _: usize) {}
}

/// Stage 1 over a dataset: each unique passage is annotated once, in
/// parallel up to the configured bound, and fanned out to its examples.
pub fn mark_dataset(
    dataset: &QADataset,
    backend: &dyn CompletionBackend,
    config: &ChainConfig,
) -> (Vec<MarkedRecord>, Vec<Dropped>) {
    let mut unique: Vec<&str> = Vec::new();
    let mut passage_index: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &dataset.examples {
        passage_index.entry(e.passage.as_str()).or_insert_with(|| {
            unique.push(e.passage.as_str());
            unique.len() - 1
        });
    }

    let budget = config.token_budget();
    let settings = DecontextSettings {
        k: config.k,
        labels: &config.labels,
        template: Some(&config.template),
        rules: &config.rules,
        budget: &budget,
        max_tokens: config.max_tokens.decontext,
    };
    let runs = bounded_map(&unique, config.parallelism, &NoProbe, |_, p| {
        decontextualize_passage(p, backend, &settings)
    });

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for e in &dataset.examples {
        match &runs[passage_index[e.passage.as_str()]] {
            Ok(run) => records.push(MarkedRecord {
                example_id: e.id.clone(),
                passage: run.passage.clone(),
            }),
            Err(err) => dropped.push(Dropped {
                example_id: e.id.clone(),
                stage: "decontext".into(),
                reason: err.to_string(),
            }),
        }
    }
    (records, dropped)
}

fn sentence_forms(passage: &MarkedPassage) -> Vec<SentenceForms> {
    passage
        .sentences
        .iter()
        .map(|s| SentenceForms {
            original: s.original.clone(),
            marked: (s.marked != s.original).then(|| s.marked.clone()),
        })
        .collect()
}

/// The shared exemplar pool: per example, the gold-heuristic rationale
/// (when one exists) in both chain-of-thought and validation form, plus a
/// similarity index over all pool questions.
struct ExemplarPool {
    cot: Vec<Option<CotExemplar>>,
    validation: Vec<Option<ValidationExemplar>>,
    index: Bm25Index,
}

fn build_pool(dataset: &QADataset, marked_by_id: &BTreeMap<&str, &MarkedPassage>) -> ExemplarPool {
    let mut cot = Vec::with_capacity(dataset.len());
    let mut validation = Vec::with_capacity(dataset.len());
    for e in &dataset.examples {
        let rationale = marked_by_id.get(e.id.as_str()).and_then(|mp| {
            make_exemplar_rationale(&e.question, &sentence_forms(mp), &e.gold_answers)
        });
        match rationale {
            Some(r) => {
                let marked_text = marked_by_id[e.id.as_str()].text.clone();
                cot.push(Some(CotExemplar {
                    question: e.question.clone(),
                    passage: marked_text,
                    rationale: r.clone(),
                    answer: e.gold_answers[0].clone(),
                }));
                validation.push(Some(ValidationExemplar {
                    question: e.question.clone(),
                    rationale: r,
                    answer: e.gold_answers[0].clone(),
                }));
            }
            None => {
                cot.push(None);
                validation.push(None);
            }
        }
    }
    let questions: Vec<String> = dataset
        .examples
        .iter()
        .map(|e| e.question.clone())
        .collect();
    ExemplarPool {
        cot,
        validation,
        index: Bm25Index::with_defaults(&questions),
    }
}

/// Stage-2 output for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CotRecord {
    pub example_id: String,
    pub rationale: String,
    pub answer: String,
    pub f1: f64,
}

/// Stage 2: chain-of-thought QA over the marked passages.
pub fn cot_stage(
    dataset: &QADataset,
    marked: &[MarkedRecord],
    backend: &dyn CompletionBackend,
    config: &ChainConfig,
) -> (Vec<CotRecord>, Vec<Dropped>) {
    let marked_by_id: BTreeMap<&str, &MarkedPassage> = marked
        .iter()
        .map(|m| (m.example_id.as_str(), &m.passage))
        .collect();
    let pool = build_pool(dataset, &marked_by_id);
    let budget = config.token_budget();

    let mut dropped = Vec::new();
    let mut reqs = Vec::new();
    let mut req_examples: Vec<&QAExample> = Vec::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        let Some(mp) = marked_by_id.get(e.id.as_str()) else {
            continue; // already dropped at the markup stage
        };
        let ranked = pool.index.top_k(&e.question, dataset.len());
        let candidates: Vec<&CotExemplar> = ranked
            .iter()
            .filter(|(j, _)| *j != i)
            .filter_map(|(j, _)| pool.cot[*j].as_ref())
            .collect();
        match build_cot_prompt(&candidates, &e.question, &mp.text, &config.labels, &budget) {
            Ok(prompt) => {
                reqs.push(CompletionRequest::new(
                    prompt.text,
                    config.max_tokens.cot,
                    vec!["\n\n".into()],
                    "cot",
                ));
                req_examples.push(e);
            }
            Err(err) => dropped.push(Dropped {
                example_id: e.id.clone(),
                stage: "cot".into(),
                reason: err.to_string(),
            }),
        }
    }

    let mut records = Vec::new();
    for (e, result) in req_examples
        .iter()
        .zip(complete_batch(backend, &reqs, config.parallelism))
    {
        let parsed = result
            .map_err(|err| err.to_string())
            .and_then(|c| parse_cot(&c, &config.labels).map_err(|err| err.to_string()));
        match parsed {
            Ok((rationale, answer)) => {
                let f1 = score_answer(&answer, &e.gold_answers).f1;
                records.push(CotRecord {
                    example_id: e.id.clone(),
                    rationale,
                    answer,
                    f1,
                });
            }
            Err(reason) => dropped.push(Dropped {
                example_id: e.id.clone(),
                stage: "cot".into(),
                reason,
            }),
        }
    }
    (records, dropped)
}

/// Stage-3 output for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub example_id: String,
    pub answer: String,
    pub f1: f64,
}

/// Stage 3: answer again from the rationale alone.
pub fn validation_stage(
    dataset: &QADataset,
    marked: &[MarkedRecord],
    cot: &[CotRecord],
    backend: &dyn CompletionBackend,
    config: &ChainConfig,
) -> (Vec<ValidationRecord>, Vec<Dropped>) {
    let marked_by_id: BTreeMap<&str, &MarkedPassage> = marked
        .iter()
        .map(|m| (m.example_id.as_str(), &m.passage))
        .collect();
    let pool = build_pool(dataset, &marked_by_id);
    let budget = config.token_budget();
    let example_pos: BTreeMap<&str, usize> = dataset
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();

    let mut dropped = Vec::new();
    let mut reqs = Vec::new();
    let mut req_rows: Vec<(&CotRecord, &QAExample)> = Vec::new();
    for record in cot {
        let Some(&i) = example_pos.get(record.example_id.as_str()) else {
            dropped.push(Dropped {
                example_id: record.example_id.clone(),
                stage: "validate".into(),
                reason: "unknown example id".into(),
            });
            continue;
        };
        let e = &dataset.examples[i];
        let ranked = pool.index.top_k(&e.question, dataset.len());
        let candidates: Vec<&ValidationExemplar> = ranked
            .iter()
            .filter(|(j, _)| *j != i)
            .filter_map(|(j, _)| pool.validation[*j].as_ref())
            .collect();
        match build_validation_prompt(
            &candidates,
            &e.question,
            &record.rationale,
            &config.labels,
            &budget,
        ) {
            Ok(prompt) => {
                reqs.push(CompletionRequest::new(
                    prompt.text,
                    config.max_tokens.validate,
                    vec!["\n\n".into()],
                    "validate",
                ));
                req_rows.push((record, e));
            }
            Err(err) => dropped.push(Dropped {
                example_id: record.example_id.clone(),
                stage: "validate".into(),
                reason: err.to_string(),
            }),
        }
    }

    let mut records = Vec::new();
    for ((cot_record, e), result) in req_rows
        .iter()
        .zip(complete_batch(backend, &reqs, config.parallelism))
    {
        let parsed = result
            .map_err(|err| err.to_string())
            .and_then(|c| parse_validation(&c, &config.labels).map_err(|err| err.to_string()));
        match parsed {
            Ok(answer) => {
                let f1 = score_answer(&answer, &e.gold_answers).f1;
                records.push(ValidationRecord {
                    example_id: cot_record.example_id.clone(),
                    answer,
                    f1,
                });
            }
            Err(reason) => dropped.push(Dropped {
                example_id: cot_record.example_id.clone(),
                stage: "validate".into(),
                reason,
            }),
        }
    }
    (records, dropped)
}

/// Join the three stage outputs into silver records. `kept` is set from
/// the threshold: both answers must score at least it.
pub fn assemble_silver(
    marked: &[MarkedRecord],
    cot: &[CotRecord],
    validated: &[ValidationRecord],
    threshold: f64,
) -> Vec<SilverRecord> {
    let marked_by_id: BTreeMap<&str, &MarkedPassage> = marked
        .iter()
        .map(|m| (m.example_id.as_str(), &m.passage))
        .collect();
    let cot_by_id: BTreeMap<&str, &CotRecord> =
        cot.iter().map(|c| (c.example_id.as_str(), c)).collect();
    validated
        .iter()
        .filter_map(|v| {
            let c = cot_by_id.get(v.example_id.as_str())?;
            let mp = marked_by_id.get(v.example_id.as_str())?;
            Some(SilverRecord {
                example_id: v.example_id.clone(),
                marked_passage: (*mp).clone(),
                cot_rationale: c.rationale.clone(),
                cot_answer: c.answer.clone(),
                validated_answer: v.answer.clone(),
                cot_f1: c.f1,
                validated_f1: v.f1,
                kept: c.f1 >= threshold && v.f1 >= threshold,
            })
        })
        .collect()
}

/// Partition silver records by the filter rule: kept means both the
/// chain-of-thought and validation answers scored at least the threshold
/// (the boundary itself is kept). The partition is exhaustive and
/// disjoint, and the `kept` flag is rewritten to match the policy applied
/// here.
pub fn filter_silver(
    records: Vec<SilverRecord>,
    threshold: f64,
) -> (Vec<SilverRecord>, Vec<SilverRecord>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for mut r in records {
        r.kept = r.cot_f1 >= threshold && r.validated_f1 >= threshold;
        if r.kept {
            kept.push(r);
        } else {
            dropped.push(r);
        }
    }
    (kept, dropped)
}

/// Everything a chain run produces.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub silver: Vec<SilverRecord>,
    pub dropped: Vec<Dropped>,
    pub counts: BTreeMap<String, u64>,
}

/// Run the full chain: markup, chain-of-thought, validation, scoring.
pub fn run_chain(
    dataset: &QADataset,
    backend: &dyn CompletionBackend,
    config: &ChainConfig,
) -> ChainOutput {
    let (marked, mut dropped) = mark_dataset(dataset, backend, config);
    let (cot, cot_dropped) = cot_stage(dataset, &marked, backend, config);
    dropped.extend(cot_dropped);
    let (validated, val_dropped) = validation_stage(dataset, &marked, &cot, backend, config);
    dropped.extend(val_dropped);
    let silver = assemble_silver(&marked, &cot, &validated, config.threshold);

    let mut counts = BTreeMap::new();
    counts.insert("examples".into(), dataset.len() as u64);
    counts.insert("marked".into(), marked.len() as u64);
    counts.insert("cot".into(), cot.len() as u64);
    counts.insert("validated".into(), validated.len() as u64);
    counts.insert("silver".into(), silver.len() as u64);
    counts.insert(
        "kept".into(),
        silver.iter().filter(|r| r.kept).count() as u64,
    );
    counts.insert("dropped".into(), dropped.len() as u64);
    ChainOutput {
        silver,
        dropped,
        counts,
    }
}

/// One student training row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentTaskRecord {
    pub task: String,
    pub example_id: String,
    pub input: String,
    pub target: String,
}

/// Records written per task file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCounts {
    pub decontext: usize,
    pub span_selection: usize,
    pub rationale_rc: usize,
    pub end_to_end: usize,
}

/// Export the four task files from kept silver records. The
/// decontextualization task is emitted once per unique passage (markup is
/// question-neutral); the end-to-end task covers the whole dataset unless
/// configured to kept records only.
pub fn export_student_tasks(
    kept: &[SilverRecord],
    dataset: &QADataset,
    config: &ChainConfig,
    out_dir: &Path,
) -> Result<ExportCounts, SilverError> {
    std::fs::create_dir_all(out_dir).map_err(|source| SilverError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let by_id: BTreeMap<&str, &QAExample> = dataset
        .examples
        .iter()
        .map(|e| (e.id.as_str(), e))
        .collect();

    let mut decontext = Vec::new();
    let mut seen_passages: std::collections::HashSet<&str> = std::collections::HashSet::new();
    for r in kept {
        let Some(example) = by_id.get(r.example_id.as_str()) else {
            continue;
        };
        if !seen_passages.insert(example.passage.as_str()) {
            continue;
        }
        let sentences = &r.marked_passage.sentences;
        for (t, s) in sentences.iter().enumerate() {
            let start = t.saturating_sub(config.k);
            let context: Vec<String> = sentences[start..t]
                .iter()
                .map(|prev| prev.marked.clone())
                .collect();
            decontext.push(StudentTaskRecord {
                task: "decontext".into(),
                example_id: r.example_id.clone(),
                input: linearize_decontext(&config.labels, &context, &s.original),
                target: s.marked.clone(),
            });
        }
    }

    let span_selection: Vec<StudentTaskRecord> = kept
        .iter()
        .filter_map(|r| {
            let e = by_id.get(r.example_id.as_str())?;
            Some(StudentTaskRecord {
                task: "span_selection".into(),
                example_id: r.example_id.clone(),
                input: span_input(&config.labels, &e.question, &r.marked_passage.text),
                target: r.cot_rationale.clone(),
            })
        })
        .collect();

    let rationale_rc: Vec<StudentTaskRecord> = kept
        .iter()
        .filter_map(|r| {
            let e = by_id.get(r.example_id.as_str())?;
            Some(StudentTaskRecord {
                task: "rationale_rc".into(),
                example_id: r.example_id.clone(),
                input: answer_from_rationale_input(&config.labels, &e.question, &r.cot_rationale),
                // Gold, not the teacher's answer: partial matches pass the
                // filter but must not train the student on noise.
                target: e.gold_answers[0].clone(),
            })
        })
        .collect();

    let end_to_end: Vec<StudentTaskRecord> = if config.end_to_end_kept_only {
        kept.iter()
            .filter_map(|r| {
                let e = by_id.get(r.example_id.as_str())?;
                Some(end_to_end_record(&config.labels, e))
            })
            .collect()
    } else {
        dataset
            .examples
            .iter()
            .map(|e| end_to_end_record(&config.labels, e))
            .collect()
    };

    corpus::write_records(&decontext, &out_dir.join("decontext.jsonl"))?;
    corpus::write_records(&span_selection, &out_dir.join("span_selection.jsonl"))?;
    corpus::write_records(&rationale_rc, &out_dir.join("rationale_rc.jsonl"))?;
    corpus::write_records(&end_to_end, &out_dir.join("end_to_end.jsonl"))?;
    Ok(ExportCounts {
        decontext: decontext.len(),
        span_selection: span_selection.len(),
        rationale_rc: rationale_rc.len(),
        end_to_end: end_to_end.len(),
    })
}

fn end_to_end_record(labels: &PromptLabels, e: &QAExample) -> StudentTaskRecord {
    StudentTaskRecord {
        task: "end_to_end".into(),
        example_id: e.id.clone(),
        input: answer_from_passage_input(labels, &e.question, &e.passage),
        target: e.gold_answers[0].clone(),
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub prompt_checksum: String,
    pub backend: String,
    pub counter: String,
    pub seed: u64,
    pub counts: BTreeMap<String, u64>,
    /// Digest of every input file the run consumed.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        config: &ChainConfig,
        backend: &dyn CompletionBackend,
        counts: BTreeMap<String, u64>,
    ) -> Self {
        Self {
            config_digest: config.digest(),
            prompt_checksum: config.template.checksum.clone(),
            backend: backend.descriptor(),
            counter: config.counter.name().to_string(),
            seed: config.seed,
            counts,
            inputs: BTreeMap::new(),
        }
    }

    pub fn with_input(mut self, name: &str, path: &Path) -> Result<Self, SilverError> {
        let bytes = std::fs::read(path).map_err(|source| SilverError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), SilverError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|source| SilverError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
