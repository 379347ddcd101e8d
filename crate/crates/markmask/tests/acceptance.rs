//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use markmask::backends::{CachingBackend, CompletionBackend, ScriptedBackend};
use markmask::corpus::{QADataset, QAExample};
use markmask::eval;
use markmask::markup::{self, MarkedText, MarkupSpan};
use markmask::prompting::{self, PromptLabels};
use markmask::retrieval::{Bm25Index, TokenBudget};
use markmask::silver::{self, ChainConfig};
use markmask::student::{self, PipelineConfig, StudentBackends};
use markmask::tokens::{default_counter, TokenCounter};

fn pass(n: usize, what: &str) {
    println!("PASS criterion {n}: {what}");
}

// ---------------------------------------------------------------- 1

const PLAIN_ALPHABET: &[char] = &[
    'a', 'b', 'c', 'x', 'y', 'z', 'A', 'Z', '0', '9', ' ', ' ', '.', ',', '!', '-', '\'', 'é',
    'ß', 'Ω', '漢', '🜁',
];
const CONTENT_ALPHABET: &[char] = &[
    'a', 'b', 'c', 'd', 'A', 'B', '0', ' ', '.', ',', 'é', 'Ω', '漢',
];

fn random_marked(rng: &mut ChaCha8Rng) -> MarkedText {
    let plain_len = rng.gen_range(0..60);
    let plain: String = (0..plain_len)
        .map(|_| PLAIN_ALPHABET[rng.gen_range(0..PLAIN_ALPHABET.len())])
        .collect();
    let n_chars = plain.chars().count();
    let mut offsets: Vec<usize> = (0..rng.gen_range(0..5))
        .map(|_| rng.gen_range(0..=n_chars))
        .collect();
    offsets.sort_unstable();
    let spans = offsets
        .into_iter()
        .map(|insert_after| {
            let len = rng.gen_range(1..8);
            let mut content: String = (0..len)
                .map(|_| CONTENT_ALPHABET[rng.gen_range(0..CONTENT_ALPHABET.len())])
                .collect();
            if content.trim().is_empty() {
                content.push('x');
            }
            MarkupSpan {
                insert_after,
                content,
            }
        })
        .collect();
    MarkedText { plain, spans }
}

#[test]
fn criterion_01_markup_round_trip_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x01);
    let start = Instant::now();
    let mut failures = 0usize;
    for _ in 0..10_000 {
        let m = random_marked(&mut rng);
        let rendered = markup::render(&m).expect("valid marked text renders");
        let reparsed = markup::parse_marked(&rendered).expect("rendered text parses");
        if reparsed != m || markup::strip(&rendered).unwrap() != m.plain {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    assert_eq!(failures, 0);
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "10k round trips took {elapsed:?}"
    );
    pass(1, &format!("10,000 markup round trips, 0 failures, {elapsed:?}"));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_well_formedness_fixtures() {
    let eshmun_marked = "The grieving goddess [Astarte] revived Eshmun and transported him \
                         [Eshmun] to the heavens where she [Astarte] made him [Eshmun] into a \
                         god of heaven.";
    let eshmun_original = "The grieving goddess revived Eshmun and transported him to the \
                           heavens where she made him into a god of heaven.";
    assert!(markup::is_well_formed(eshmun_marked, eshmun_original).well_formed);

    let moved_marked = "As a schoolboy [Charles-Camille Saint-Saëns] was outstanding";
    let moved_original = "As a schoolboy Saint-Saëns was outstanding";
    assert!(!markup::is_well_formed(moved_marked, moved_original).well_formed);
    pass(2, "rationale fixture well-formed, moved-text fixture ill-formed");
}

// ---------------------------------------------------------------- 3

mod answer_oracle {
    //! Brute-force normalization and overlap, independent of the library
    //! implementation.

    pub fn normalize(text: &str) -> Vec<String> {
        let folded = caseless::default_case_fold_str(text);
        let mut cleaned = String::new();
        for c in folded.chars() {
            if c.is_alphanumeric() || c.is_whitespace() {
                cleaned.push(c);
            }
        }
        let mut tokens = Vec::new();
        for t in cleaned.split_whitespace() {
            if t != "a" && t != "an" && t != "the" {
                tokens.push(t.to_string());
            }
        }
        tokens
    }

    fn overlap(pred: &[String], gold: &[String]) -> usize {
        let mut gold_left: Vec<&String> = gold.iter().collect();
        let mut common = 0;
        for p in pred {
            if let Some(pos) = gold_left.iter().position(|g| *g == p) {
                gold_left.remove(pos);
                common += 1;
            }
        }
        common
    }

    pub fn score(pred: &str, golds: &[String]) -> (bool, f64) {
        let p = normalize(pred);
        let mut em = false;
        let mut best = 0.0f64;
        for gold in golds {
            let g = normalize(gold);
            if p == g {
                em = true;
            }
            let f1 = if p.is_empty() && g.is_empty() {
                1.0
            } else if p.is_empty() || g.is_empty() {
                0.0
            } else {
                let common = overlap(&p, &g) as f64;
                if common == 0.0 {
                    0.0
                } else {
                    let precision = common / p.len() as f64;
                    let recall = common / g.len() as f64;
                    2.0 * precision * recall / (precision + recall)
                }
            };
            if f1 > best {
                best = f1;
            }
        }
        (em, best)
    }
}

fn random_answer(rng: &mut ChaCha8Rng) -> String {
    const WORDS: &[&str] = &[
        "astarte", "goddess", "Eshmun", "the", "a", "an", "king", "RIVER", "city", "1904",
        "north", "Saint-Saëns", "U.S.", "blue",
    ];
    const DECOR: &[&str] = &["", ".", ",", "!", "  ", "\t"];
    let n = rng.gen_range(0..5);
    (0..n)
        .map(|_| {
            format!(
                "{}{}",
                WORDS[rng.gen_range(0..WORDS.len())],
                DECOR[rng.gen_range(0..DECOR.len())]
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_03_answer_scoring_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x03);
    for _ in 0..1_000 {
        let pred = random_answer(&mut rng);
        let golds: Vec<String> = (0..rng.gen_range(1..4))
            .map(|_| random_answer(&mut rng))
            .collect();
        let got = eval::score_answer(&pred, &golds);
        let (em, f1) = answer_oracle::score(&pred, &golds);
        assert_eq!(got.em, em, "EM mismatch for {pred:?} vs {golds:?}");
        assert!(
            (got.f1 - f1).abs() < 1e-12,
            "F1 mismatch for {pred:?} vs {golds:?}: {} vs {f1}",
            got.f1
        );
    }
    pass(3, "1,000 random answer scores equal the brute-force oracle");
}

// ---------------------------------------------------------------- 4

mod bm25_oracle {
    //! Direct-formula evaluation with its own tokenizer and statistics.

    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn rank(docs: &[String], query: &str, k1: f64, b: f64) -> Vec<(usize, f64)> {
        let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
        let n = docs.len() as f64;
        let avgdl = if docs.is_empty() {
            0.0
        } else {
            tokenized.iter().map(|t| t.len()).sum::<usize>() as f64 / n
        };
        let mut q_terms = tokenize(query);
        q_terms.sort();
        q_terms.dedup();
        let mut scored: Vec<(usize, f64)> = tokenized
            .iter()
            .enumerate()
            .map(|(i, doc)| {
                let dl = doc.len() as f64;
                let mut score = 0.0;
                for t in &q_terms {
                    let tf = doc.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let df = tokenized
                        .iter()
                        .filter(|d| d.iter().any(|w| w == t))
                        .count() as f64;
                    let idf = ((n - df + 0.5) / (df + 0.5)).ln().max(0.0);
                    let norm = if avgdl > 0.0 { dl / avgdl } else { 0.0 };
                    score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
                }
                (i, score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }
}

#[test]
fn criterion_04_bm25_matches_direct_formula() {
    const VOCAB: &[&str] = &[
        "eshmun", "astarte", "goddess", "king", "river", "city", "north", "woods", "beirut",
        "temple", "hunt", "story", "year", "name", "zebra",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x04);
    for corpus_id in 0..100 {
        let n_docs = rng.gen_range(1..=50);
        let docs: Vec<String> = (0..n_docs)
            .map(|_| {
                let len = rng.gen_range(0..12);
                (0..len)
                    .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let index = Bm25Index::build(&docs, 1.2, 0.75);
        for _ in 0..3 {
            let q_len = rng.gen_range(1..=6);
            let query = (0..q_len)
                .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
                .collect::<Vec<_>>()
                .join(" ");
            let got = index.top_k(&query, docs.len());
            let want = bm25_oracle::rank(&docs, &query, 1.2, 0.75);
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.0, w.0, "rank order differs in corpus {corpus_id} for {query:?}");
                assert!(
                    (g.1 - w.1).abs() < 1e-9,
                    "score differs: {} vs {}",
                    g.1,
                    w.1
                );
            }
        }
    }
    pass(4, "100 random corpora ranked identically to the direct formula");
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_no_generated_prompt_exceeds_the_budget() {
    let labels = PromptLabels::default();
    let counter = default_counter();
    let budget = TokenBudget::new(1024, counter.clone());
    let template = prompting::DecontextTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x05);

    let sentence_pool: Vec<String> = (0..40)
        .map(|i| {
            let len = rng.gen_range(8..60);
            let words: Vec<String> = (0..len).map(|j| format!("word{i}x{j}")).collect();
            format!("{}.", words.join(" "))
        })
        .collect();

    let mut emitted = 0usize;
    let mut violations = 0usize;
    let mut check = |text: &str| {
        emitted += 1;
        if counter.count(text) > 1024 {
            violations += 1;
        }
    };

    // Chain-of-thought prompts with large exemplar pools.
    for i in 0..200 {
        let exemplars: Vec<prompting::CotExemplar> = (0..20)
            .map(|j| prompting::CotExemplar {
                question: format!("Question number {j} about item {i}?"),
                passage: sentence_pool[(i + j) % sentence_pool.len()].clone(),
                rationale: sentence_pool[(i + 2 * j + 1) % sentence_pool.len()].clone(),
                answer: format!("answer{j}"),
            })
            .collect();
        let refs: Vec<&prompting::CotExemplar> = exemplars.iter().collect();
        let marked = sentence_pool[i % sentence_pool.len()].clone();
        let p = prompting::build_cot_prompt(&refs, "Who did what?", &marked, &labels, &budget)
            .expect("target fits");
        check(&p.text);
    }

    // Validation prompts.
    for i in 0..200 {
        let exemplars: Vec<prompting::ValidationExemplar> = (0..30)
            .map(|j| prompting::ValidationExemplar {
                question: format!("Validation question {j}?"),
                rationale: sentence_pool[(i + j) % sentence_pool.len()].clone(),
                answer: format!("answer{j}"),
            })
            .collect();
        let refs: Vec<&prompting::ValidationExemplar> = exemplars.iter().collect();
        let p = prompting::build_validation_prompt(
            &refs,
            "Which answer is right?",
            &sentence_pool[i % sentence_pool.len()],
            &labels,
            &budget,
        )
        .expect("target fits");
        check(&p.text);
    }

    // Decontextualization prompts with long context windows.
    for i in 0..120 {
        let context: Vec<String> = (0..rng.gen_range(0..10))
            .map(|j| sentence_pool[(i + j) % sentence_pool.len()].clone())
            .collect();
        let p = prompting::build_decontext_prompt(
            Some(&template),
            &labels,
            &context,
            &sentence_pool[i % sentence_pool.len()],
            5,
            Some(&budget),
        )
        .expect("sentence fits");
        check(&p);
    }

    assert!(emitted >= 500, "only {emitted} prompts generated");
    assert_eq!(violations, 0);
    pass(
        5,
        &format!("{emitted} generated prompts all within the 1024-token budget"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_filter_rule_matches_the_exclusion_policy() {
    use markmask::corpus::{MarkedPassage, SilverRecord};
    let pairs = [
        (0.0, 0.0),
        (0.49, 1.0),
        (1.0, 0.49),
        (0.5, 0.49),
        (0.49, 0.5),
        (0.5, 0.5),
        (0.5, 1.0),
        (1.0, 0.5),
        (0.51, 0.51),
        (1.0, 1.0),
    ];
    let records: Vec<SilverRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, (c, v))| SilverRecord {
            example_id: format!("r{i}"),
            marked_passage: MarkedPassage {
                text: "P.".into(),
                sentences: vec![],
            },
            cot_rationale: "R".into(),
            cot_answer: "A".into(),
            validated_answer: "A".into(),
            cot_f1: *c,
            validated_f1: *v,
            kept: false,
        })
        .collect();
    let (kept, dropped) = silver::filter_silver(records, 0.5);
    let kept_ids: Vec<&str> = kept.iter().map(|r| r.example_id.as_str()).collect();
    assert_eq!(kept_ids, vec!["r5", "r6", "r7", "r8", "r9"]);
    assert_eq!(kept.len() + dropped.len(), pairs.len());
    pass(6, "kept set is exactly {both F1 >= 0.5}, boundary inclusive");
}

// ---------------------------------------------------------------- 7

struct LeakFixture {
    example: QAExample,
    backends: StudentBackends,
}

fn leak_fixture(i: usize, config: &PipelineConfig) -> LeakFixture {
    let s0 = format!("Landmark number {i} stands in district {}.", i % 7);
    let s1 = format!("Its curator catalogued relic {i} during year {}.", 1800 + i);
    let passage = format!("{s0} {s1}");
    let question = format!("Which relic did curators catalogue at site {i}?");
    let example = QAExample {
        id: format!("leak-{i}"),
        question: question.clone(),
        passage: passage.clone(),
        gold_answers: vec![format!("relic {i}")],
        source: "synthetic".into(),
    };
    let r0 = format!("Landmark number {i} stands in district {} [of the old town].", i % 7);
    let r1 = format!(
        "Its [landmark {i}'s] curator catalogued relic {i} during year {}.",
        1800 + i
    );
    let budget = TokenBudget::new(config.budget, config.counter.clone());
    let p0 = prompting::build_decontext_prompt(None, &config.labels, &[], &s0, config.k, Some(&budget))
        .unwrap();
    let p1 = prompting::build_decontext_prompt(
        None,
        &config.labels,
        &[r0.clone()],
        &s1,
        config.k,
        Some(&budget),
    )
    .unwrap();
    let marked = format!("{r0} {r1}");
    let span_prompt = prompting::span_input(&config.labels, &question, &marked);
    let rc_prompt = prompting::answer_from_rationale_input(&config.labels, &question, &r1);
    LeakFixture {
        example,
        backends: StudentBackends {
            markup: Arc::new(ScriptedBackend::from_pairs([
                (p0, r0.clone()),
                (p1, r1.clone()),
            ])),
            span: Arc::new(ScriptedBackend::from_pairs([(span_prompt, r1.clone())])),
            rc: Arc::new(ScriptedBackend::from_pairs([(
                rc_prompt,
                format!("relic {i}"),
            )])),
            end_to_end: None,
        },
    }
}

#[test]
fn criterion_07_bottleneck_holds_over_200_runs() {
    let config = PipelineConfig::default();
    let mut violations = 0usize;
    for i in 0..200 {
        let fixture = leak_fixture(i, &config);
        let result = student::run_pipeline(&fixture.example, &fixture.backends, &config)
            .unwrap_or_else(|e| panic!("run {i} failed: {e}"));
        if student::passage_leak(
            &result.stage_inputs.rc,
            &fixture.example.passage,
            &result.rationale,
            config.leak_ngram,
        )
        .is_some()
        {
            violations += 1;
        }
        if student::question_leak(
            &result.stage_inputs.markup,
            &fixture.example.question,
            &fixture.example.passage,
            config.leak_ngram,
        )
        .is_some()
        {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
    pass(7, "0 bottleneck violations over 200 scripted pipeline runs");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_context_window_is_exactly_the_last_five() {
    let config = ChainConfig::default();
    assert_eq!(config.k, 5);
    let budget = config.token_budget();
    let sentences: Vec<String> = (1..=12)
        .map(|t| format!("Sentence number {t:02} stands here."))
        .collect();
    let rewrites: Vec<String> = (1..=12)
        .map(|t| format!("Sentence number {t:02} stands here [tag{t:02}]."))
        .collect();
    let passage = sentences.join(" ");

    let mut fixtures = Vec::new();
    let mut context: Vec<String> = Vec::new();
    for (s, r) in sentences.iter().zip(&rewrites) {
        let prompt = prompting::build_decontext_prompt(
            Some(&config.template),
            &config.labels,
            &context,
            s,
            config.k,
            Some(&budget),
        )
        .unwrap();
        fixtures.push((prompt, r.clone()));
        context.push(r.clone());
    }
    let backend = ScriptedBackend::from_pairs(fixtures);
    let settings = silver::DecontextSettings {
        k: config.k,
        labels: &config.labels,
        template: Some(&config.template),
        rules: &config.rules,
        budget: &budget,
        max_tokens: config.max_tokens.decontext,
    };
    let run = silver::decontextualize_passage(&passage, &backend, &settings).unwrap();
    assert_eq!(run.prompts.len(), 12);

    // The prompt for sentence 10 (index 9) must carry the rewrites of
    // sentences 5..=9 and nothing earlier. The preamble has no "tag"
    // text, so tag markers identify rewrites unambiguously.
    let tenth = &run.prompts[9];
    for t in 5..=9 {
        assert!(
            tenth.contains(&format!("[tag{t:02}]")),
            "missing rewrite of sentence {t}"
        );
    }
    for t in 1..=4 {
        assert!(
            !tenth.contains(&format!("[tag{t:02}]")),
            "stale rewrite of sentence {t} leaked into the context"
        );
    }
    assert!(!tenth.contains("[tag10]"));
    pass(8, "sentence 10's context is exactly the rewrites of sentences 5-9");
}

// ---------------------------------------------------------------- 9

const SENT_0: &str = "Eshmun, a young man from Beirut, was hunting in the woods when Astarte \
                      saw him and was stricken by his beauty.";
const SENT_1: &str = "The grieving goddess revived Eshmun and transported him to the heavens \
                      where she made him into a god of heaven.";
const REWRITE_0: &str = "Eshmun, a young man from Beirut, was hunting in the woods when Astarte \
                         saw him [Eshmun] and was stricken by his [Eshmun] beauty.";
const REWRITE_1: &str = "The grieving goddess [Astarte] revived Eshmun and transported him \
                         [Eshmun] to the heavens where she [Astarte] made him [Eshmun] into a \
                         god of heaven.";
const QUESTION: &str = "What is the name of the person who revived Eshmun?";

fn replay_fixture_pairs(config: &ChainConfig) -> Vec<(String, String)> {
    let budget = config.token_budget();
    let labels = &config.labels;
    let marked = format!("{REWRITE_0} {REWRITE_1}");
    let p0 = prompting::build_decontext_prompt(
        Some(&config.template),
        labels,
        &[],
        SENT_0,
        config.k,
        Some(&budget),
    )
    .unwrap();
    let p1 = prompting::build_decontext_prompt(
        Some(&config.template),
        labels,
        &[REWRITE_0.to_string()],
        SENT_1,
        config.k,
        Some(&budget),
    )
    .unwrap();
    let cot = prompting::build_cot_prompt(&[], QUESTION, &marked, labels, &budget).unwrap();
    let validation =
        prompting::build_validation_prompt(&[], QUESTION, REWRITE_1, labels, &budget).unwrap();
    vec![
        (p0, REWRITE_0.to_string()),
        (p1, REWRITE_1.to_string()),
        (cot.text, format!("{REWRITE_1}\nAnswer: Astarte")),
        (validation.text, "Astarte".to_string()),
    ]
}

fn student_fixture_pairs(config: &PipelineConfig) -> (QAExample, Vec<(String, String)>) {
    let example = QAExample {
        id: "eshmun-1".into(),
        question: QUESTION.into(),
        passage: format!("{SENT_0} {SENT_1}"),
        gold_answers: vec!["Astarte".into()],
        source: "fixture".into(),
    };
    let budget = TokenBudget::new(config.budget, config.counter.clone());
    let p0 = prompting::build_decontext_prompt(None, &config.labels, &[], SENT_0, config.k, Some(&budget))
        .unwrap();
    let p1 = prompting::build_decontext_prompt(
        None,
        &config.labels,
        &[REWRITE_0.to_string()],
        SENT_1,
        config.k,
        Some(&budget),
    )
    .unwrap();
    let marked = format!("{REWRITE_0} {REWRITE_1}");
    let span_prompt = prompting::span_input(&config.labels, QUESTION, &marked);
    let rc_prompt = prompting::answer_from_rationale_input(&config.labels, QUESTION, REWRITE_1);
    let e2e_prompt =
        prompting::answer_from_passage_input(&config.labels, QUESTION, &example.passage);
    let pairs = vec![
        (p0, REWRITE_0.to_string()),
        (p1, REWRITE_1.to_string()),
        (span_prompt, REWRITE_1.to_string()),
        (rc_prompt, "Astarte".to_string()),
        (e2e_prompt, "Astarte".to_string()),
    ];
    (example, pairs)
}

/// One full scripted run: chain, filter, export, student pipeline, and
/// report, everything written under `out`. Returns backend call counts.
fn full_run(out: &std::path::Path, cache: &std::path::Path) -> (usize, usize) {
    std::fs::create_dir_all(out).unwrap();
    let chain_config = ChainConfig::default();
    let dataset = QADataset {
        examples: vec![QAExample {
            id: "eshmun-1".into(),
            question: QUESTION.into(),
            passage: format!("{SENT_0} {SENT_1}"),
            gold_answers: vec!["Astarte".into()],
            source: "fixture".into(),
        }],
    };

    let teacher_inner = Arc::new(ScriptedBackend::from_pairs(replay_fixture_pairs(
        &chain_config,
    )));
    let teacher = CachingBackend::new(teacher_inner.clone(), &cache.join("teacher")).unwrap();
    let chain_out = silver::run_chain(&dataset, &teacher, &chain_config);
    markmask::corpus::write_records(&chain_out.silver, &out.join("silver.jsonl")).unwrap();
    let (kept, _) = silver::filter_silver(chain_out.silver, chain_config.threshold);
    markmask::corpus::write_records(&kept, &out.join("silver.kept.jsonl")).unwrap();
    silver::export_student_tasks(&kept, &dataset, &chain_config, &out.join("tasks")).unwrap();

    let pipeline_config = PipelineConfig::default();
    let (example, student_pairs) = student_fixture_pairs(&pipeline_config);
    let student_inner = Arc::new(ScriptedBackend::from_pairs(student_pairs));
    let student_backend: Arc<dyn CompletionBackend> = Arc::new(
        CachingBackend::new(student_inner.clone(), &cache.join("student")).unwrap(),
    );
    let backends = StudentBackends {
        markup: student_backend.clone(),
        span: student_backend.clone(),
        rc: student_backend.clone(),
        end_to_end: Some(student_backend),
    };
    let results = student::run_pipeline_batch(
        &QADataset {
            examples: vec![example.clone()],
        },
        &backends,
        &pipeline_config,
        2,
    );
    let records: Vec<student::ResultRecord> = results
        .iter()
        .map(|r| student::ResultRecord::from(r.as_ref().unwrap()))
        .collect();
    markmask::corpus::write_records(&records, &out.join("results.jsonl")).unwrap();

    // Report over the results.
    let counter = default_counter();
    let items: Vec<(String, Vec<String>)> = records
        .iter()
        .map(|r| (r.answer.clone(), example.gold_answers.clone()))
        .collect();
    let scores = eval::score_dataset(&items);
    let report = eval::EvalReport {
        systems: vec![eval::SystemAccuracy {
            system: "pipeline".into(),
            em: scores.iter().map(|s| s.em01()).sum::<f64>() / scores.len() as f64,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64,
            count: scores.len(),
        }],
        extractive_rate: Some(
            records
                .iter()
                .filter(|r| eval::extractiveness(&r.rationale, &r.marked_passage))
                .count() as f64
                / records.len() as f64,
        ),
        compression: Some(
            eval::compression_report(
                &records
                    .iter()
                    .map(|r| (example.passage.clone(), r.rationale.clone()))
                    .collect::<Vec<_>>(),
                counter.as_ref(),
            )
            .unwrap(),
        ),
        ..Default::default()
    };
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .unwrap();

    (teacher_inner.calls(), student_inner.calls())
}

#[test]
fn criterion_09_replay_is_byte_identical_with_full_cache_hits() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let (teacher_calls_1, student_calls_1) = full_run(&dir.path().join("run1"), &cache);
    assert!(teacher_calls_1 > 0 && student_calls_1 > 0);
    let (teacher_calls_2, student_calls_2) = full_run(&dir.path().join("run2"), &cache);
    assert_eq!(teacher_calls_2, 0, "second run must be served from cache");
    assert_eq!(student_calls_2, 0, "second run must be served from cache");

    for file in [
        "silver.jsonl",
        "silver.kept.jsonl",
        "tasks/decontext.jsonl",
        "tasks/span_selection.jsonl",
        "tasks/rationale_rc.jsonl",
        "tasks/end_to_end.jsonl",
        "results.jsonl",
        "report.json",
    ] {
        let a = std::fs::read(dir.path().join("run1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between replays");
    }
    pass(
        9,
        "consecutive scripted runs byte-identical; zero backend calls on replay",
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_entailment_rate_and_template_are_exact() {
    let items: Vec<eval::EntailmentItem> = (0..20)
        .map(|i| eval::EntailmentItem {
            rationale: format!("Premise sentence number {i}."),
            question: format!("What is fact {i}?"),
            answer: format!("value {i}"),
        })
        .collect();

    // Verbatim hypothesis strings, built independently.
    for item in &items {
        let expected = format!(
            "The answer to \"{}\" is \"{}\"",
            item.question, item.answer
        );
        assert_eq!(eval::nli_hypothesis(&item.question, &item.answer), expected);
    }

    // Entail exactly the premises of items 0, 3, 6, 9, 12, 15, 18.
    let entailed = |premise: &str| {
        (0..20)
            .filter(|i| i % 3 == 0)
            .any(|i| premise == format!("Premise sentence number {i}."))
    };
    let mut fixtures = Vec::new();
    for i in &items {
        for j in &items {
            let prompt = eval::CompletionNli::prompt(
                &j.rationale,
                &eval::nli_hypothesis(&i.question, &i.answer),
            );
            let verdict = if entailed(&j.rationale) {
                "entailment"
            } else {
                "not entailment"
            };
            fixtures.push((prompt, verdict.to_string()));
        }
    }
    let nli = eval::CompletionNli::new(Arc::new(ScriptedBackend::from_pairs(fixtures)));
    let report = eval::entailment_rate(&items, &nli, 13, 4);
    assert_eq!(report.evaluated, 20);
    assert_eq!(report.errors, 0);
    assert!((report.entail_rate - 7.0 / 20.0).abs() < 1e-12);
    // The verdict depends only on the premise, so the shuffled control
    // sees the same seven entailing premises.
    assert!((report.shuffled_entail_rate - 7.0 / 20.0).abs() < 1e-12);
    pass(10, "entailment rate 7/20 exactly; 20 verbatim hypothesis strings");
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_rewrite_quality_matches_hand_computed_components() {
    const EPS: f64 = 1e-6;
    struct Case {
        source: &'static str,
        prediction: &'static str,
        references: &'static [&'static str],
        keep: f64,
        add: f64,
        delete: f64,
    }
    // Component values worked out by hand from the n-gram definitions
    // (n = 1..4, vacuous operations count as perfect).
    let cases = [
        Case {
            source: "a b c",
            prediction: "a b c",
            references: &["a b c"],
            keep: 1.0,
            add: 1.0,
            delete: 1.0,
        },
        Case {
            source: "a b",
            prediction: "a b",
            references: &["a b x"],
            keep: 1.0,
            add: 0.25,
            delete: 1.0,
        },
        Case {
            source: "a b c",
            prediction: "a c",
            references: &["a c"],
            keep: 1.0,
            add: 1.0,
            delete: 1.0,
        },
        Case {
            source: "a",
            prediction: "a b",
            references: &["a b", "a"],
            keep: 1.0,
            add: 5.0 / 6.0,
            delete: 1.0,
        },
        Case {
            source: "a b c",
            prediction: "a c",
            references: &["a b c"],
            keep: 0.45,
            add: 0.75,
            delete: 0.25,
        },
    ];
    for (i, case) in cases.iter().enumerate() {
        let s = eval::sari(case.source, case.prediction, case.references);
        assert!(
            (s.keep_f1 - case.keep).abs() < EPS,
            "case {i} keep: {} vs {}",
            s.keep_f1,
            case.keep
        );
        assert!(
            (s.add_f1 - case.add).abs() < EPS,
            "case {i} add: {} vs {}",
            s.add_f1,
            case.add
        );
        assert!(
            (s.delete_f1 - case.delete).abs() < EPS,
            "case {i} delete: {} vs {}",
            s.delete_f1,
            case.delete
        );
        let expected = (case.keep + case.add + case.delete) / 3.0;
        assert!((s.sari - expected).abs() < EPS);
    }
    pass(11, "5 hand-computed rewrite-quality cases match within 1e-6");
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_perturbation_round_trips_and_substitutes_every_mention() {
    let examples = vec![
        QAExample {
            id: "p1".into(),
            question: "Who spoke?".into(),
            passage: "Winston Churchill spoke. Many cheered Winston Churchill that day.".into(),
            gold_answers: vec!["Winston Churchill".into()],
            source: "s".into(),
        },
        QAExample {
            id: "p2".into(),
            question: "Which company?".into(),
            passage: "AT&T grew. Rivals watched AT&T closely; AT&T ignored them.".into(),
            gold_answers: vec!["AT&T".into()],
            source: "s".into(),
        },
        QAExample {
            id: "p3".into(),
            question: "Who is unrelated?".into(),
            passage: "Napoleon met nobody of consequence.".into(),
            gold_answers: vec!["nobody".into()],
            source: "s".into(),
        },
    ];
    let dataset = QADataset { examples };
    let fixtures: Vec<(String, String)> = vec![
        (
            eval::CompletionNer::prompt(&dataset.examples[0].passage),
            "PERSON\tWinston Churchill".to_string(),
        ),
        (
            eval::CompletionNer::prompt(&dataset.examples[1].passage),
            "ORG\tAT&T".to_string(),
        ),
        (
            eval::CompletionNer::prompt(&dataset.examples[2].passage),
            "PERSON\tNapoleon".to_string(),
        ),
    ];
    let ner = eval::CompletionNer::new(Arc::new(ScriptedBackend::from_pairs(fixtures)));
    let mut pool = BTreeMap::new();
    pool.insert("PERSON".to_string(), vec!["Patti Smith".to_string()]);
    pool.insert("ORG".to_string(), vec!["the New York Knicks".to_string()]);
    let outcome = eval::perturb_entities(&dataset, &ner, &eval::EntityPool(pool), 21, 2).unwrap();
    assert!(outcome.skipped.is_empty());
    assert_eq!(outcome.map.len(), 2); // p3's entity is not in its answer

    // Every mention substituted, in answer and passage alike.
    for record in &outcome.map {
        let original_example = dataset.get(&record.example_id).unwrap();
        let perturbed = outcome.dataset.get(&record.example_id).unwrap();
        for sub in &record.substitutions {
            let before = original_example.passage.matches(&sub.original).count();
            let after = perturbed.passage.matches(&sub.replacement).count();
            assert_eq!(before, after, "mention count changed for {}", sub.original);
            assert_eq!(perturbed.passage.matches(&sub.original).count(), 0);
            assert!(perturbed.gold_answers.iter().all(|a| !a.contains(&sub.original)));
        }
    }

    // Byte-identical inversion.
    let restored = eval::invert_perturbation(&outcome.dataset, &outcome.map);
    let original_bytes = serde_json::to_vec(&dataset.examples).unwrap();
    let restored_bytes = serde_json::to_vec(&restored.examples).unwrap();
    assert_eq!(original_bytes, restored_bytes);
    pass(12, "perturbation inverts byte-identically; all mentions substituted");
}

// ---------------------------------------------------------------- 13

#[test]
fn criterion_13_exemplar_rationale_heuristic_cases() {
    use prompting::SentenceForms;

    // (a) The answer appears in exactly one sentence.
    let sentences = vec![
        SentenceForms {
            original: "Eshmun hunted in the woods.".into(),
            marked: None,
        },
        SentenceForms {
            original: "Astarte revived him there.".into(),
            marked: None,
        },
    ];
    assert_eq!(
        prompting::make_exemplar_rationale("Who revived Eshmun?", &sentences, &["Astarte".into()])
            .as_deref(),
        Some("Astarte revived him there.")
    );

    // (b) The answer appears only through the markup.
    let sentences = vec![SentenceForms {
        original: "The grieving goddess revived Eshmun.".into(),
        marked: Some("The grieving goddess [Astarte] revived Eshmun.".into()),
    }];
    assert_eq!(
        prompting::make_exemplar_rationale("Who revived Eshmun?", &sentences, &["Astarte".into()])
            .as_deref(),
        Some("The grieving goddess [Astarte] revived Eshmun.")
    );

    // (c) The answer appears nowhere.
    let sentences = vec![SentenceForms {
        original: "Nothing about the goddess at all.".into(),
        marked: Some("Nothing about the goddess at all [truly].".into()),
    }];
    assert!(prompting::make_exemplar_rationale(
        "Who revived Eshmun?",
        &sentences,
        &["Astarte".into()]
    )
    .is_none());

    pass(13, "exemplar rationale: unique sentence, marked form, absent");
}
