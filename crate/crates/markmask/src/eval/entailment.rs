//! Rationale consistency via natural language inference.
//!
//! Each rationale is the premise; the hypothesis is the fixed
//! linearization of the question and predicted answer. A seeded shuffle
//! of the rationales gives the control rate: a sound NLI backend should
//! almost never see entailment between unrelated pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{complete_batch, BackendError, CompletionBackend, CompletionRequest};

use std::sync::Arc;

/// Verbatim hypothesis template.
pub fn nli_hypothesis(question: &str, answer: &str) -> String {
    format!("The answer to \"{question}\" is \"{answer}\"")
}

/// Binary entailment judgments over (premise, hypothesis) pairs.
pub trait NliBackend: Send + Sync {
    fn entails_batch(
        &self,
        pairs: &[(String, String)],
        parallelism: usize,
    ) -> Vec<Result<bool, BackendError>>;
}

/// NLI over the completion wire protocol: the pair is linearized as
/// `Premise:/Hypothesis:/Entailment:` and the completion's first word
/// decides the label. Deterministic scripted backends plug straight in.
pub struct CompletionNli {
    backend: Arc<dyn CompletionBackend>,
    max_tokens: usize,
}

impl CompletionNli {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            max_tokens: 8,
        }
    }

    pub fn prompt(premise: &str, hypothesis: &str) -> String {
        format!("Premise: {premise}\nHypothesis: {hypothesis}\nEntailment:")
    }
}

impl NliBackend for CompletionNli {
    fn entails_batch(
        &self,
        pairs: &[(String, String)],
        parallelism: usize,
    ) -> Vec<Result<bool, BackendError>> {
        let reqs: Vec<CompletionRequest> = pairs
            .iter()
            .map(|(p, h)| {
                CompletionRequest::new(Self::prompt(p, h), self.max_tokens, vec!["\n".into()], "nli")
            })
            .collect();
        complete_batch(self.backend.as_ref(), &reqs, parallelism)
            .into_iter()
            .map(|r| {
                r.and_then(|completion| {
                    let label = completion.trim().to_lowercase();
                    if label.starts_with("entail") || label == "yes" {
                        Ok(true)
                    } else if label.starts_with("not")
                        || label.starts_with("no")
                        || label.starts_with("neutral")
                        || label.starts_with("contradict")
                    {
                        Ok(false)
                    } else {
                        Err(BackendError::InvalidRequest(format!(
                            "unrecognized entailment label {label:?}"
                        )))
                    }
                })
            })
            .collect()
    }
}

/// One scored prediction to check for consistency.
#[derive(Debug, Clone)]
pub struct EntailmentItem {
    pub rationale: String,
    pub question: String,
    pub answer: String,
}

/// Entailment rates with the shuffled control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentReport {
    pub entail_rate: f64,
    pub shuffled_entail_rate: f64,
    pub evaluated: usize,
    /// Items excluded from the denominator because the backend failed.
    pub errors: usize,
}

/// Fraction of items whose rationale entails the question/answer
/// hypothesis, plus the same rate after a seeded shuffle of rationales.
pub fn entailment_rate(
    items: &[EntailmentItem],
    nli: &dyn NliBackend,
    shuffle_seed: u64,
    parallelism: usize,
) -> EntailmentReport {
    let run = |pairs: &[(String, String)]| -> (usize, usize, usize) {
        let results = nli.entails_batch(pairs, parallelism);
        let mut entailed = 0;
        let mut evaluated = 0;
        let mut errors = 0;
        for r in results {
            match r {
                Ok(true) => {
                    entailed += 1;
                    evaluated += 1;
                }
                Ok(false) => evaluated += 1,
                Err(_) => errors += 1,
            }
        }
        (entailed, evaluated, errors)
    };

    let pairs: Vec<(String, String)> = items
        .iter()
        .map(|i| (i.rationale.clone(), nli_hypothesis(&i.question, &i.answer)))
        .collect();
    let (entailed, evaluated, errors) = run(&pairs);

    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut shuffled_rationales: Vec<&str> = items.iter().map(|i| i.rationale.as_str()).collect();
    shuffled_rationales.shuffle(&mut rng);
    let shuffled_pairs: Vec<(String, String)> = items
        .iter()
        .zip(&shuffled_rationales)
        .map(|(i, r)| (r.to_string(), nli_hypothesis(&i.question, &i.answer)))
        .collect();
    let (s_entailed, s_evaluated, _) = run(&shuffled_pairs);

    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    EntailmentReport {
        entail_rate: rate(entailed, evaluated),
        shuffled_entail_rate: rate(s_entailed, s_evaluated),
        evaluated,
        errors,
    }
}
