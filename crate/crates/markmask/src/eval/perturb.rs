//! Entity-swap stress test: replace entity names that appear in both the
//! answer and the passage with same-class names from a pool, consistently
//! across every mention, with an invertible substitution map.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::backends::{complete_batch, BackendError, CompletionBackend, CompletionRequest};
use crate::corpus::{QADataset, QAExample};

/// A recognized entity mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub class: String,
}

/// Named entity recognition over passages.
pub trait NerBackend: Send + Sync {
    fn entities_batch(
        &self,
        texts: &[String],
        parallelism: usize,
    ) -> Vec<Result<Vec<Entity>, BackendError>>;
}

/// NER over the completion wire protocol: the text is linearized as
/// `Text:/Entities:` and the completion lists one `CLASS<TAB>surface`
/// pair per line.
pub struct CompletionNer {
    backend: Arc<dyn CompletionBackend>,
    max_tokens: usize,
}

impl CompletionNer {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        Self {
            backend,
            max_tokens: 256,
        }
    }

    pub fn prompt(text: &str) -> String {
        format!("Text: {text}\nEntities:")
    }

    fn parse(completion: &str) -> Vec<Entity> {
        completion
            .lines()
            .filter_map(|l| {
                let (class, surface) = l.trim().split_once('\t')?;
                if class.is_empty() || surface.is_empty() {
                    return None;
                }
                Some(Entity {
                    surface: surface.to_string(),
                    class: class.to_string(),
                })
            })
            .collect()
    }
}

impl NerBackend for CompletionNer {
    fn entities_batch(
        &self,
        texts: &[String],
        parallelism: usize,
    ) -> Vec<Result<Vec<Entity>, BackendError>> {
        let reqs: Vec<CompletionRequest> = texts
            .iter()
            .map(|t| {
                CompletionRequest::new(Self::prompt(t), self.max_tokens, vec!["\n\n".into()], "ner")
            })
            .collect();
        complete_batch(self.backend.as_ref(), &reqs, parallelism)
            .into_iter()
            .map(|r| r.map(|c| Self::parse(&c)))
            .collect()
    }
}

/// Replacement names per entity class.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EntityPool(pub BTreeMap<String, Vec<String>>);

impl EntityPool {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One applied substitution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub original: String,
    pub replacement: String,
    pub class: String,
}

/// Substitutions applied to one example, in application order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbRecord {
    pub example_id: String,
    pub substitutions: Vec<Substitution>,
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub dataset: QADataset,
    pub map: Vec<PerturbRecord>,
    /// Examples left unperturbed, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn char_at_is_alnum(chars: &[char], idx: Option<usize>) -> bool {
    idx.and_then(|i| chars.get(i))
        .is_some_and(|c| c.is_alphanumeric())
}

/// Replace word-boundary occurrences of `from` with `to`. Characters
/// outside the matched spans are untouched.
fn boundary_replace(text: &str, from: &str, to: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let needle: Vec<char> = from.chars().collect();
    if needle.is_empty() {
        return text.to_string();
    }
    let mut out = String::new();
    let mut i = 0;
    while i < chars.len() {
        let end = i + needle.len();
        let matches = end <= chars.len()
            && chars[i..end] == needle[..]
            && !char_at_is_alnum(&chars, i.checked_sub(1))
            && !char_at_is_alnum(&chars, Some(end));
        if matches {
            out.push_str(to);
            i = end;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    out
}

fn contains_boundary(text: &str, needle: &str) -> bool {
    boundary_replace(text, needle, "\u{0}") != text
}

/// Build the perturbed dataset. Entity names appearing in both the
/// passage and at least one gold answer are replaced everywhere (passage
/// and answers) by a same-class pool name, drawn by seeded shuffle
/// without reuse across the run. Examples whose class pool runs dry are
/// skipped with a warning entry.
pub fn perturb_entities(
    dataset: &QADataset,
    ner: &dyn NerBackend,
    pool: &EntityPool,
    seed: u64,
    parallelism: usize,
) -> Result<PerturbOutcome, EvalError> {
    let passages: Vec<String> = dataset.examples.iter().map(|e| e.passage.clone()).collect();
    let entity_sets = ner.entities_batch(&passages, parallelism);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (class, names) in &pool.0 {
        let mut q: Vec<&str> = names.iter().map(String::as_str).collect();
        q.shuffle(&mut rng);
        queues.insert(class, q);
    }

    let mut out = Vec::with_capacity(dataset.len());
    let mut map = Vec::new();
    let mut skipped = Vec::new();

    for (example, entities) in dataset.examples.iter().zip(entity_sets) {
        let entities = match entities {
            Ok(e) => e,
            Err(e) => {
                skipped.push((example.id.clone(), format!("ner failure: {e}")));
                out.push(example.clone());
                continue;
            }
        };

        // Deduplicate surfaces, keep recognition order, longest first so a
        // short name never corrupts a longer one containing it.
        let mut seen = HashSet::new();
        let mut targets: Vec<&Entity> = entities
            .iter()
            .filter(|e| seen.insert(e.surface.clone()))
            .filter(|e| {
                contains_boundary(&example.passage, &e.surface)
                    && example
                        .gold_answers
                        .iter()
                        .any(|g| contains_boundary(g, &e.surface))
            })
            .collect();
        targets.sort_by_key(|e| std::cmp::Reverse(e.surface.chars().count()));

        let mut substitutions = Vec::new();
        let mut failed: Option<String> = None;
        let mut passage = example.passage.clone();
        let mut answers = example.gold_answers.clone();
        for entity in targets {
            let queue = queues.get_mut(entity.class.as_str());
            let replacement = queue.and_then(|q| {
                // Skip candidates already present in the text, which would
                // make the substitution ambiguous to invert.
                let pos = q.iter().position(|cand| {
                    *cand != entity.surface
                        && !contains_boundary(&passage, cand)
                        && !answers.iter().any(|a| contains_boundary(a, cand))
                });
                pos.map(|p| q.remove(p))
            });
            let replacement = match replacement {
                Some(r) => r.to_string(),
                None => {
                    failed = Some(format!(
                        "no unused replacement for class {:?}",
                        entity.class
                    ));
                    break;
                }
            };
            passage = boundary_replace(&passage, &entity.surface, &replacement);
            for a in &mut answers {
                *a = boundary_replace(a, &entity.surface, &replacement);
            }
            substitutions.push(Substitution {
                original: entity.surface.clone(),
                replacement,
                class: entity.class.clone(),
            });
        }

        if let Some(reason) = failed {
            skipped.push((example.id.clone(), reason));
            out.push(example.clone());
            continue;
        }
        if !substitutions.is_empty() {
            map.push(PerturbRecord {
                example_id: example.id.clone(),
                substitutions,
            });
        }
        out.push(QAExample {
            passage,
            gold_answers: answers,
            ..example.clone()
        });
    }

    Ok(PerturbOutcome {
        dataset: QADataset { examples: out },
        map,
        skipped,
    })
}

/// Undo a perturbation using its substitution map.
pub fn invert_perturbation(dataset: &QADataset, map: &[PerturbRecord]) -> QADataset {
    let by_id: BTreeMap<&str, &PerturbRecord> =
        map.iter().map(|r| (r.example_id.as_str(), r)).collect();
    let examples = dataset
        .examples
        .iter()
        .map(|e| {
            let Some(record) = by_id.get(e.id.as_str()) else {
                return e.clone();
            };
            let mut passage = e.passage.clone();
            let mut answers = e.gold_answers.clone();
            for sub in record.substitutions.iter().rev() {
                passage = boundary_replace(&passage, &sub.replacement, &sub.original);
                for a in &mut answers {
                    *a = boundary_replace(a, &sub.replacement, &sub.original);
                }
            }
            QAExample {
                passage,
                gold_answers: answers,
                ..e.clone()
            }
        })
        .collect();
    QADataset { examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;

    fn example(id: &str, passage: &str, answer: &str) -> QAExample {
        QAExample {
            id: id.into(),
            question: "Who?".into(),
            passage: passage.into(),
            gold_answers: vec![answer.into()],
            source: "t".into(),
        }
    }

    fn scripted_ner(pairs: Vec<(String, String)>) -> CompletionNer {
        CompletionNer::new(Arc::new(ScriptedBackend::from_pairs(pairs)))
    }

    fn pool() -> EntityPool {
        let mut m = BTreeMap::new();
        m.insert(
            "PERSON".to_string(),
            vec!["Patti Smith".to_string(), "Ada Lovelace".to_string()],
        );
        EntityPool(m)
    }

    #[test]
    fn boundary_replace_respects_word_edges() {
        assert_eq!(
            boundary_replace("Churchill and Churchills", "Churchill", "Smith"),
            "Smith and Churchills"
        );
        assert_eq!(boundary_replace("a-Churchill-b", "Churchill", "Smith"), "a-Smith-b");
    }

    #[test]
    fn entity_in_answer_and_passage_is_replaced_everywhere() {
        let passage = "Winston Churchill spoke. Churchill? No: Winston Churchill again.";
        let ex = example("q1", passage, "Winston Churchill");
        let dataset = QADataset {
            examples: vec![ex],
        };
        let ner = scripted_ner(vec![(
            CompletionNer::prompt(passage),
            "PERSON\tWinston Churchill".to_string(),
        )]);
        let out = perturb_entities(&dataset, &ner, &pool(), 3, 1).unwrap();
        assert!(out.skipped.is_empty());
        let perturbed = &out.dataset.examples[0];
        assert!(!perturbed.passage.contains("Winston Churchill"));
        assert!(!perturbed.gold_answers[0].contains("Winston"));
        let replacement = &out.map[0].substitutions[0].replacement;
        assert_eq!(perturbed.passage.matches(replacement.as_str()).count(), 2);
        assert_eq!(&perturbed.gold_answers[0], replacement);
        // "Churchill?" alone is a different surface and stays.
        assert!(perturbed.passage.contains("Churchill?"));
    }

    #[test]
    fn passage_only_entity_is_unchanged() {
        let passage = "Napoleon met Churchill.";
        let ex = example("q1", passage, "Churchill");
        let dataset = QADataset {
            examples: vec![ex.clone()],
        };
        let ner = scripted_ner(vec![(
            CompletionNer::prompt(passage),
            "PERSON\tNapoleon\nPERSON\tChurchill".to_string(),
        )]);
        let out = perturb_entities(&dataset, &ner, &pool(), 3, 1).unwrap();
        let perturbed = &out.dataset.examples[0];
        assert!(perturbed.passage.contains("Napoleon"));
        assert!(!perturbed.passage.contains("Churchill"));
    }

    #[test]
    fn perturb_then_invert_is_identity() {
        let p1 = "Winston Churchill spoke to Ada King.";
        let p2 = "Marie Curie worked in Paris.";
        let dataset = QADataset {
            examples: vec![
                example("q1", p1, "Winston Churchill"),
                example("q2", p2, "Marie Curie"),
            ],
        };
        let ner = scripted_ner(vec![
            (
                CompletionNer::prompt(p1),
                "PERSON\tWinston Churchill\nPERSON\tAda King".to_string(),
            ),
            (CompletionNer::prompt(p2), "PERSON\tMarie Curie".to_string()),
        ]);
        let out = perturb_entities(&dataset, &ner, &pool(), 11, 2).unwrap();
        assert_ne!(out.dataset, dataset);
        let back = invert_perturbation(&out.dataset, &out.map);
        assert_eq!(back, dataset);
    }

    #[test]
    fn empty_class_pool_skips_example() {
        let passage = "The AT&T building.";
        let ex = example("q1", passage, "AT&T");
        let dataset = QADataset {
            examples: vec![ex.clone()],
        };
        let ner = scripted_ner(vec![(
            CompletionNer::prompt(passage),
            "ORG\tAT&T".to_string(),
        )]);
        let out = perturb_entities(&dataset, &ner, &pool(), 3, 1).unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.dataset.examples[0], ex);
        assert!(out.map.is_empty());
    }

    #[test]
    fn draws_are_seeded_and_without_reuse() {
        let p1 = "Alice met nobody.";
        let p2 = "Bob met nobody.";
        let dataset = QADataset {
            examples: vec![example("q1", p1, "Alice"), example("q2", p2, "Bob")],
        };
        let ner_fixtures = vec![
            (CompletionNer::prompt(p1), "PERSON\tAlice".to_string()),
            (CompletionNer::prompt(p2), "PERSON\tBob".to_string()),
        ];
        let a = perturb_entities(
            &dataset,
            &scripted_ner(ner_fixtures.clone()),
            &pool(),
            5,
            1,
        )
        .unwrap();
        let b = perturb_entities(&dataset, &scripted_ner(ner_fixtures), &pool(), 5, 1).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let r1 = &a.map[0].substitutions[0].replacement;
        let r2 = &a.map[1].substitutions[0].replacement;
        assert_ne!(r1, r2);
    }
}
