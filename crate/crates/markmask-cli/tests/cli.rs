//! Drives the installed binary over a fully scripted run.

use std::path::Path;
use std::process::Command;

use markmask::backends::ScriptedBackend;
use markmask::corpus::{MarkedPassage, QAExample, SilverRecord};
use markmask::prompting::{
    build_cot_prompt, build_decontext_prompt, build_validation_prompt,
};
use markmask::silver::ChainConfig;

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

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_markmask"))
}

fn write_inputs(dir: &Path) {
    let example = QAExample {
        id: "eshmun-1".into(),
        question: QUESTION.into(),
        passage: format!("{SENT_0} {SENT_1}"),
        gold_answers: vec!["Astarte".into()],
        source: "fixture".into(),
    };
    markmask::corpus::write_records(&[example], &dir.join("raw.jsonl")).unwrap();

    let config = ChainConfig::default();
    let budget = config.token_budget();
    let labels = &config.labels;
    let marked = format!("{REWRITE_0} {REWRITE_1}");
    let p0 = build_decontext_prompt(
        Some(&config.template),
        labels,
        &[],
        SENT_0,
        config.k,
        Some(&budget),
    )
    .unwrap();
    let p1 = build_decontext_prompt(
        Some(&config.template),
        labels,
        &[REWRITE_0.to_string()],
        SENT_1,
        config.k,
        Some(&budget),
    )
    .unwrap();
    let cot = build_cot_prompt(&[], QUESTION, &marked, labels, &budget).unwrap();
    let validation = build_validation_prompt(&[], QUESTION, REWRITE_1, labels, &budget).unwrap();
    let cot_completion = format!("{REWRITE_1}\nAnswer: Astarte");
    let fixtures: Vec<(&str, &str)> = vec![
        (p0.as_str(), REWRITE_0),
        (p1.as_str(), REWRITE_1),
        (cot.text.as_str(), cot_completion.as_str()),
        (validation.text.as_str(), "Astarte"),
    ];
    ScriptedBackend::write_fixture_file(fixtures, &dir.join("teacher.jsonl")).unwrap();
}

fn run_pipeline_into(dir: &Path, run: &Path) {
    std::fs::create_dir_all(run).unwrap();
    let teacher = format!("teacher=scripted:{}", dir.join("teacher.jsonl").display());
    let steps: Vec<Vec<String>> = vec![
        vec![
            "ingest".into(),
            "--input".into(),
            dir.join("raw.jsonl").display().to_string(),
            "--format".into(),
            "native".into(),
            "--out".into(),
            run.join("dataset.jsonl").display().to_string(),
        ],
        vec![
            "decontext".into(),
            "--dataset".into(),
            run.join("dataset.jsonl").display().to_string(),
            "--backend".into(),
            teacher.clone(),
            "--out".into(),
            run.join("marked.jsonl").display().to_string(),
        ],
        vec![
            "cot".into(),
            "--dataset".into(),
            run.join("dataset.jsonl").display().to_string(),
            "--marked".into(),
            run.join("marked.jsonl").display().to_string(),
            "--backend".into(),
            teacher.clone(),
            "--out".into(),
            run.join("cot.jsonl").display().to_string(),
        ],
        vec![
            "validate".into(),
            "--dataset".into(),
            run.join("dataset.jsonl").display().to_string(),
            "--marked".into(),
            run.join("marked.jsonl").display().to_string(),
            "--cot".into(),
            run.join("cot.jsonl").display().to_string(),
            "--backend".into(),
            teacher.clone(),
            "--out".into(),
            run.join("silver.jsonl").display().to_string(),
        ],
        vec![
            "filter".into(),
            run.join("silver.jsonl").display().to_string(),
        ],
        vec![
            "export".into(),
            "--silver".into(),
            run.join("silver.kept.jsonl").display().to_string(),
            "--dataset".into(),
            run.join("dataset.jsonl").display().to_string(),
            "--out".into(),
            run.join("tasks").display().to_string(),
        ],
    ];
    for step in steps {
        let output = bin().args(&step).output().unwrap();
        assert!(
            output.status.success(),
            "step {:?} failed:\n{}\n{}",
            step[0],
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
    }
}

#[test]
fn full_scripted_run_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    run_pipeline_into(dir.path(), &run_a);
    run_pipeline_into(dir.path(), &run_b);

    let silver: Vec<SilverRecord> =
        markmask::corpus::read_records(&run_a.join("silver.kept.jsonl")).unwrap();
    assert_eq!(silver.len(), 1);
    assert!(silver[0].marked_passage.text.contains("[Astarte]"));
    assert!(silver[0].kept);

    for file in [
        "dataset.jsonl",
        "marked.jsonl",
        "cot.jsonl",
        "silver.jsonl",
        "silver.kept.jsonl",
        "silver.dropped.jsonl",
        "tasks/decontext.jsonl",
        "tasks/span_selection.jsonl",
        "tasks/rationale_rc.jsonl",
        "tasks/end_to_end.jsonl",
        "tasks/manifest.json",
    ] {
        let a = std::fs::read(run_a.join(file)).unwrap_or_else(|_| panic!("missing {file}"));
        let b = std::fs::read(run_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
    }
}

#[test]
fn filter_partitions_and_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        SilverRecord {
            example_id: "a".into(),
            marked_passage: MarkedPassage {
                text: "P.".into(),
                sentences: vec![],
            },
            cot_rationale: "R.".into(),
            cot_answer: "x".into(),
            validated_answer: "y".into(),
            cot_f1: 1.0,
            validated_f1: 0.4,
            kept: true, // stale flag; filter recomputes
        },
        SilverRecord {
            example_id: "b".into(),
            marked_passage: MarkedPassage {
                text: "P.".into(),
                sentences: vec![],
            },
            cot_rationale: "R.".into(),
            cot_answer: "x".into(),
            validated_answer: "x".into(),
            cot_f1: 0.8,
            validated_f1: 0.9,
            kept: false,
        },
    ];
    let input = dir.path().join("in.jsonl");
    markmask::corpus::write_records(&records, &input).unwrap();
    let output = bin()
        .args(["filter", "--threshold", "0.5"])
        .arg(&input)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("kept 1 dropped 1"), "stdout: {stdout}");
    let kept: Vec<SilverRecord> =
        markmask::corpus::read_records(&dir.path().join("in.kept.jsonl")).unwrap();
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].example_id, "b");
}

#[test]
fn usage_errors_exit_two() {
    let output = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let output = bin().args(["ingest"]).output().unwrap(); // missing --input
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_backend_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path());
    let output = bin()
        .args([
            "decontext",
            "--dataset",
            dir.path().join("raw.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("teacher"));
}

#[test]
fn report_renders_a_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let report = serde_json::json!({
        "systems": [{"system": "pipeline", "em": 1.0, "f1": 1.0, "count": 1}],
        "extractive_rate": 0.5,
    });
    let path = dir.path().join("report.json");
    std::fs::write(&path, serde_json::to_string(&report).unwrap()).unwrap();
    let output = bin()
        .args(["report", "--report", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("Answer accuracy"));
    assert!(stdout.contains("50.0%"));
}
