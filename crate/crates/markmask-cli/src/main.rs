//! Pipeline driver: ingest datasets, run the teacher chain stage by
//! stage, filter and export silver data, run the honest-student pipeline,
//! evaluate, perturb, and render reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{FileConfig, Overrides, Settings};
use markmask::corpus::{
    self, DatasetFormat, MarkedPassage, QADataset, QAExample, SilverRecord,
};
use markmask::eval::{
    self, decontext_quality, entailment_rate, perturb_entities, render_report, CompletionNer,
    CompletionNli, EntailmentItem, EvalReport, InlineMode, PerturbRecord, SystemAccuracy,
};
use markmask::markup;
use markmask::silver::{
    assemble_silver, cot_stage, export_student_tasks, filter_silver, mark_dataset, run_chain,
    validation_stage, CotRecord, Dropped, MarkedRecord, RunManifest, ValidationRecord,
};
use markmask::student::{run_pipeline_batch, ResultRecord, StageInputs, StudentBackends};
use markmask::tokens::default_counter;

#[derive(Parser)]
#[command(
    name = "markmask",
    version,
    about = "Markup-and-mask rationale pipeline for open-book QA"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags and environment override it.
    #[arg(long, global = true, env = "MARKMASK_CONFIG")]
    config: Option<PathBuf>,
    /// Backend for a role, e.g. teacher=scripted:fix.jsonl (repeatable).
    #[arg(long = "backend", global = true, value_name = "ROLE=SPEC")]
    backends: Vec<String>,
    /// Context window for decontextualization.
    #[arg(long, global = true, env = "MARKMASK_K")]
    k: Option<usize>,
    /// Prompt token budget.
    #[arg(long, global = true, env = "MARKMASK_BUDGET")]
    budget: Option<usize>,
    /// Silver filter threshold.
    #[arg(long, global = true, env = "MARKMASK_THRESHOLD")]
    threshold: Option<f64>,
    #[arg(long, global = true, env = "MARKMASK_SEED")]
    seed: Option<u64>,
    /// Max in-flight backend requests.
    #[arg(long, global = true, env = "MARKMASK_PARALLELISM")]
    parallelism: Option<usize>,
    /// Output path (file or directory depending on the subcommand).
    #[arg(long, global = true, env = "MARKMASK_OUT")]
    out: Option<PathBuf>,
    /// Response cache directory (per-role subdirectories).
    #[arg(long, global = true, env = "MARKMASK_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Decontextualization preamble file.
    #[arg(long, global = true, env = "MARKMASK_PROMPTS")]
    prompts: Option<PathBuf>,
    /// Sentence protection rules file.
    #[arg(long, global = true, env = "MARKMASK_RULES")]
    rules: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Mrqa,
    Native,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and write it in the native record format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "native")]
        format: FormatArg,
        /// Keep a seeded random sample of this many examples.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Stage 1: decontextualizing markup for every passage.
    Decontext {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Stage 2: chain-of-thought rationales and answers.
    Cot {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        marked: PathBuf,
    },
    /// Stage 3: validation answers from rationales alone; assembles
    /// silver records.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        marked: PathBuf,
        #[arg(long)]
        cot: PathBuf,
    },
    /// Run the whole chain in one go and write silver records.
    Chain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Partition silver records by the filter threshold.
    Filter {
        /// Silver records file.
        input: PathBuf,
    },
    /// Export the four student task files from kept silver records.
    Export {
        #[arg(long)]
        silver: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Emit the end-to-end task for kept records only.
        #[arg(long)]
        end_to_end_kept_only: bool,
    },
    /// Run the honest-student pipeline over a dataset.
    RunStudent {
        #[arg(long)]
        dataset: PathBuf,
        /// Also write per-stage audit logs here.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Also write full marked passages here.
        #[arg(long)]
        marked_out: Option<PathBuf>,
    },
    /// Compute the metric suite over a results file.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Marked passages with per-sentence flags (for well-formedness).
        #[arg(long)]
        marked: Option<PathBuf>,
        /// Inline decontextualization references.
        #[arg(long)]
        decontext_refs: Option<PathBuf>,
    },
    /// Entity-swap a dataset (or invert a previous swap).
    Perturb {
        #[arg(long)]
        dataset: PathBuf,
        /// Class-to-names pool (JSON), required unless --invert.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Substitution map: output by default, input with --invert.
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        invert: bool,
    },
    /// Render a report file as text tables.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn settings(common: &CommonArgs) -> Result<Settings> {
    let file = match &common.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    Settings::resolve(
        file,
        Overrides {
            k: common.k,
            budget: common.budget,
            threshold: common.threshold,
            seed: common.seed,
            parallelism: common.parallelism,
            out: common.out.clone(),
            cache_dir: common.cache_dir.clone(),
            prompts: common.prompts.clone(),
            rules: common.rules.clone(),
            backends: common.backends.clone(),
        },
    )
}

fn out_file(settings: &Settings, default_name: &str) -> PathBuf {
    match &settings.out {
        Some(p) => p.clone(),
        None => PathBuf::from(default_name),
    }
}

fn load_native(path: &Path) -> Result<QADataset> {
    corpus::load_dataset(path, DatasetFormat::NativeJsonl)
        .with_context(|| format!("loading {}", path.display()))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn run(cli: Cli) -> Result<()> {
    let settings = settings(&cli.common)?;
    match cli.command {
        Command::Ingest {
            input,
            format,
            sample,
        } => ingest(&settings, &input, format, sample),
        Command::Decontext { dataset } => decontext(&settings, &dataset),
        Command::Cot { dataset, marked } => cot(&settings, &dataset, &marked),
        Command::Validate {
            dataset,
            marked,
            cot,
        } => validate(&settings, &dataset, &marked, &cot),
        Command::Chain { dataset } => chain(&settings, &dataset),
        Command::Filter { input } => filter(&settings, &input),
        Command::Export {
            silver,
            dataset,
            end_to_end_kept_only,
        } => export(&settings, &silver, &dataset, end_to_end_kept_only),
        Command::RunStudent {
            dataset,
            audit,
            marked_out,
        } => run_student(&settings, &dataset, audit.as_deref(), marked_out.as_deref()),
        Command::Eval {
            results,
            dataset,
            marked,
            decontext_refs,
        } => eval_cmd(
            &settings,
            &results,
            &dataset,
            marked.as_deref(),
            decontext_refs.as_deref(),
        ),
        Command::Perturb {
            dataset,
            pool,
            map,
            invert,
        } => perturb(&settings, &dataset, pool.as_deref(), &map, invert),
        Command::Report { report } => {
            let text = std::fs::read_to_string(&report)
                .with_context(|| format!("reading {}", report.display()))?;
            let parsed: EvalReport = serde_json::from_str(&text)?;
            print!("{}", render_report(&parsed));
            Ok(())
        }
    }
}

fn ingest(settings: &Settings, input: &Path, format: FormatArg, sample: Option<usize>) -> Result<()> {
    let format = match format {
        FormatArg::Mrqa => DatasetFormat::MrqaJsonl,
        FormatArg::Native => DatasetFormat::NativeJsonl,
    };
    let dataset =
        corpus::load_dataset(input, format).with_context(|| format!("loading {}", input.display()))?;
    let dataset = match sample {
        Some(n) => dataset.sample(n, settings.seed),
        None => dataset,
    };
    let out = out_file(settings, "dataset.jsonl");
    let n = corpus::write_records(&dataset.examples, &out)?;
    let mut counts = BTreeMap::new();
    counts.insert("examples".to_string(), n as u64);
    write_stage_manifest(settings, &out, counts, "none", &[("input", input)])?;
    println!("ingested {n} examples -> {}", out.display());
    Ok(())
}

fn write_stage_manifest(
    settings: &Settings,
    out: &Path,
    counts: BTreeMap<String, u64>,
    backend: &str,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let config = settings.chain_config();
    let mut manifest = RunManifest {
        config_digest: config.digest(),
        prompt_checksum: settings.template.checksum.clone(),
        backend: backend.to_string(),
        counter: default_counter().name().to_string(),
        seed: settings.seed,
        counts,
        inputs: BTreeMap::new(),
    };
    for (name, path) in inputs {
        manifest = manifest.with_input(name, path)?;
    }
    manifest.write(&manifest_path(out))?;
    Ok(())
}

fn report_dropped(dropped: &[Dropped], out: &Path) -> Result<()> {
    corpus::write_records(dropped, out)?;
    if !dropped.is_empty() {
        eprintln!("{} examples dropped (see {})", dropped.len(), out.display());
    }
    Ok(())
}

fn dropped_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".dropped.jsonl");
    out.with_file_name(name)
}

fn decontext(settings: &Settings, dataset_path: &Path) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let backend = settings.backend("teacher")?;
    let config = settings.chain_config();
    let (records, dropped) = mark_dataset(&dataset, backend.as_ref(), &config);
    let out = out_file(settings, "marked.jsonl");
    corpus::write_records(&records, &out)?;
    report_dropped(&dropped, &dropped_path(&out))?;
    let mut counts = BTreeMap::new();
    counts.insert("marked".to_string(), records.len() as u64);
    counts.insert("dropped".to_string(), dropped.len() as u64);
    write_stage_manifest(
        settings,
        &out,
        counts,
        &backend.descriptor(),
        &[("dataset", dataset_path)],
    )?;
    println!(
        "marked {} examples ({} dropped) -> {}",
        records.len(),
        dropped.len(),
        out.display()
    );
    Ok(())
}

fn cot(settings: &Settings, dataset_path: &Path, marked_path: &Path) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let marked: Vec<MarkedRecord> = corpus::read_records(marked_path)?;
    let backend = settings.backend("teacher")?;
    let config = settings.chain_config();
    let (records, dropped) = cot_stage(&dataset, &marked, backend.as_ref(), &config);
    let out = out_file(settings, "cot.jsonl");
    corpus::write_records(&records, &out)?;
    report_dropped(&dropped, &dropped_path(&out))?;
    let mut counts = BTreeMap::new();
    counts.insert("cot".to_string(), records.len() as u64);
    counts.insert("dropped".to_string(), dropped.len() as u64);
    write_stage_manifest(
        settings,
        &out,
        counts,
        &backend.descriptor(),
        &[("dataset", dataset_path), ("marked", marked_path)],
    )?;
    println!(
        "chain-of-thought for {} examples ({} dropped) -> {}",
        records.len(),
        dropped.len(),
        out.display()
    );
    Ok(())
}

fn validate(
    settings: &Settings,
    dataset_path: &Path,
    marked_path: &Path,
    cot_path: &Path,
) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let marked: Vec<MarkedRecord> = corpus::read_records(marked_path)?;
    let cot: Vec<CotRecord> = corpus::read_records(cot_path)?;
    let backend = settings.backend("teacher")?;
    let config = settings.chain_config();
    let (validated, dropped): (Vec<ValidationRecord>, _) =
        validation_stage(&dataset, &marked, &cot, backend.as_ref(), &config);
    let silver = assemble_silver(&marked, &cot, &validated, settings.threshold);
    let out = out_file(settings, "silver.jsonl");
    corpus::write_records(&silver, &out)?;
    report_dropped(&dropped, &dropped_path(&out))?;
    let mut counts = BTreeMap::new();
    counts.insert("silver".to_string(), silver.len() as u64);
    counts.insert(
        "kept".to_string(),
        silver.iter().filter(|r| r.kept).count() as u64,
    );
    counts.insert("dropped".to_string(), dropped.len() as u64);
    write_stage_manifest(
        settings,
        &out,
        counts,
        &backend.descriptor(),
        &[
            ("dataset", dataset_path),
            ("marked", marked_path),
            ("cot", cot_path),
        ],
    )?;
    println!("assembled {} silver records -> {}", silver.len(), out.display());
    Ok(())
}

fn chain(settings: &Settings, dataset_path: &Path) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let backend = settings.backend("teacher")?;
    let config = settings.chain_config();
    let output = run_chain(&dataset, backend.as_ref(), &config);
    let out = out_file(settings, "silver.jsonl");
    corpus::write_records(&output.silver, &out)?;
    report_dropped(&output.dropped, &dropped_path(&out))?;
    write_stage_manifest(
        settings,
        &out,
        output.counts.clone(),
        &backend.descriptor(),
        &[("dataset", dataset_path)],
    )?;
    for (k, v) in &output.counts {
        println!("{k}: {v}");
    }
    println!("-> {}", out.display());
    Ok(())
}

fn filter(settings: &Settings, input: &Path) -> Result<()> {
    let records: Vec<SilverRecord> = corpus::read_records(input)?;
    let total = records.len();
    let (kept, dropped) = filter_silver(records, settings.threshold);
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("silver");
    let dir = match &settings.out {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => input.parent().unwrap_or(Path::new(".")).to_path_buf(),
    };
    let kept_path = dir.join(format!("{stem}.kept.jsonl"));
    let dropped_path = dir.join(format!("{stem}.dropped.jsonl"));
    corpus::write_records(&kept, &kept_path)?;
    corpus::write_records(&dropped, &dropped_path)?;
    let mut counts = BTreeMap::new();
    counts.insert("total".to_string(), total as u64);
    counts.insert("kept".to_string(), kept.len() as u64);
    counts.insert("dropped".to_string(), dropped.len() as u64);
    write_stage_manifest(settings, &kept_path, counts, "none", &[("silver", input)])?;
    println!(
        "kept {} dropped {} (threshold {}) -> {}, {}",
        kept.len(),
        dropped.len(),
        settings.threshold,
        kept_path.display(),
        dropped_path.display()
    );
    Ok(())
}

fn export(
    settings: &Settings,
    silver_path: &Path,
    dataset_path: &Path,
    end_to_end_kept_only: bool,
) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let records: Vec<SilverRecord> = corpus::read_records(silver_path)?;
    let kept: Vec<SilverRecord> = records.into_iter().filter(|r| r.kept).collect();
    if kept.is_empty() {
        bail!("no kept records in {}", silver_path.display());
    }
    let mut config = settings.chain_config();
    config.end_to_end_kept_only = end_to_end_kept_only;
    let out = out_file(settings, "tasks");
    let counts = export_student_tasks(&kept, &dataset, &config, &out)?;
    let mut manifest_counts = BTreeMap::new();
    manifest_counts.insert("decontext".to_string(), counts.decontext as u64);
    manifest_counts.insert("span_selection".to_string(), counts.span_selection as u64);
    manifest_counts.insert("rationale_rc".to_string(), counts.rationale_rc as u64);
    manifest_counts.insert("end_to_end".to_string(), counts.end_to_end as u64);
    let config = settings.chain_config();
    let mut manifest = RunManifest {
        config_digest: config.digest(),
        prompt_checksum: settings.template.checksum.clone(),
        backend: "none".to_string(),
        counter: default_counter().name().to_string(),
        seed: settings.seed,
        counts: manifest_counts,
        inputs: BTreeMap::new(),
    };
    manifest = manifest.with_input("silver", silver_path)?;
    manifest = manifest.with_input("dataset", dataset_path)?;
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "exported tasks: decontext {}, span_selection {}, rationale_rc {}, end_to_end {} -> {}",
        counts.decontext,
        counts.span_selection,
        counts.rationale_rc,
        counts.end_to_end,
        out.display()
    );
    Ok(())
}

/// Per-example audit row, written only with --audit.
#[derive(Serialize, Deserialize)]
struct AuditRecord {
    example_id: String,
    #[serde(flatten)]
    inputs: StageInputs,
}

fn run_student(
    settings: &Settings,
    dataset_path: &Path,
    audit: Option<&Path>,
    marked_out: Option<&Path>,
) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let backends = StudentBackends {
        markup: settings.backend("markup")?,
        span: settings.backend("span")?,
        rc: settings.backend("rc")?,
        end_to_end: if settings.has_backend("end_to_end") {
            Some(settings.backend("end_to_end")?)
        } else {
            None
        },
    };
    let config = settings.pipeline_config();
    let outcomes = run_pipeline_batch(&dataset, &backends, &config, settings.parallelism);

    let mut results: Vec<ResultRecord> = Vec::new();
    let mut marked: Vec<MarkedRecord> = Vec::new();
    let mut audits: Vec<AuditRecord> = Vec::new();
    let mut failures = 0usize;
    for outcome in &outcomes {
        match outcome {
            Ok(r) => {
                results.push(ResultRecord::from(r));
                marked.push(MarkedRecord {
                    example_id: r.example_id.clone(),
                    passage: r.marked_passage.clone(),
                });
                audits.push(AuditRecord {
                    example_id: r.example_id.clone(),
                    inputs: r.stage_inputs.clone(),
                });
            }
            Err(e) => {
                failures += 1;
                eprintln!("pipeline failure: {e}");
            }
        }
    }

    let out = out_file(settings, "results.jsonl");
    corpus::write_records(&results, &out)?;
    if let Some(path) = marked_out {
        corpus::write_records(&marked, path)?;
    }
    if let Some(path) = audit {
        corpus::write_records(&audits, path)?;
    }
    let mut counts = BTreeMap::new();
    counts.insert("results".to_string(), results.len() as u64);
    counts.insert("failures".to_string(), failures as u64);
    write_stage_manifest(settings, &out, counts, "student", &[("dataset", dataset_path)])?;
    println!(
        "student pipeline: {} results, {} failures -> {}",
        results.len(),
        failures,
        out.display()
    );
    Ok(())
}

/// Inline decontextualization reference row for `eval --decontext-refs`.
#[derive(Deserialize)]
struct DecontextRef {
    example_id: String,
    sentence: usize,
    references: Vec<String>,
}

fn eval_cmd(
    settings: &Settings,
    results_path: &Path,
    dataset_path: &Path,
    marked_path: Option<&Path>,
    refs_path: Option<&Path>,
) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    let results: Vec<ResultRecord> = corpus::read_records(results_path)?;
    let by_id: BTreeMap<&str, &QAExample> = dataset
        .examples
        .iter()
        .map(|e| (e.id.as_str(), e))
        .collect();
    let counter = default_counter();

    let mut report = EvalReport::default();

    // Answer accuracy per system.
    let pipeline_items: Vec<(String, Vec<String>)> = results
        .iter()
        .filter_map(|r| {
            by_id
                .get(r.example_id.as_str())
                .map(|e| (r.answer.clone(), e.gold_answers.clone()))
        })
        .collect();
    let pipeline_scores = eval::score_dataset(&pipeline_items);
    if !pipeline_scores.is_empty() {
        report.systems.push(SystemAccuracy {
            system: "pipeline".into(),
            em: pipeline_scores.iter().map(|s| s.em01()).sum::<f64>()
                / pipeline_scores.len() as f64,
            f1: pipeline_scores.iter().map(|s| s.f1).sum::<f64>() / pipeline_scores.len() as f64,
            count: pipeline_scores.len(),
        });
    }
    let e2e: Vec<(&ResultRecord, &str)> = results
        .iter()
        .filter_map(|r| r.end_to_end_answer.as_deref().map(|a| (r, a)))
        .collect();
    if !e2e.is_empty() {
        let items: Vec<(String, Vec<String>)> = e2e
            .iter()
            .filter_map(|(r, a)| {
                by_id
                    .get(r.example_id.as_str())
                    .map(|e| (a.to_string(), e.gold_answers.clone()))
            })
            .collect();
        let scores = eval::score_dataset(&items);
        report.systems.push(SystemAccuracy {
            system: "end-to-end".into(),
            em: scores.iter().map(|s| s.em01()).sum::<f64>() / scores.len() as f64,
            f1: scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64,
            count: scores.len(),
        });
    }

    // Selective prediction needs both answers for every example.
    if e2e.len() == results.len() && !results.is_empty() {
        let pipeline: Vec<(String, String)> = results
            .iter()
            .map(|r| (r.example_id.clone(), r.answer.clone()))
            .collect();
        let end_to_end: Vec<(String, String)> = results
            .iter()
            .map(|r| {
                (
                    r.example_id.clone(),
                    r.end_to_end_answer.clone().unwrap_or_default(),
                )
            })
            .collect();
        let golds: BTreeMap<String, Vec<String>> = dataset
            .examples
            .iter()
            .map(|e| (e.id.clone(), e.gold_answers.clone()))
            .collect();
        report.selective = Some(eval::selective_report(&pipeline, &end_to_end, &golds)?);
    }

    // Extractiveness, compression, markup statistics.
    if !results.is_empty() {
        let extractive = results
            .iter()
            .filter(|r| eval::extractiveness(&r.rationale, &r.marked_passage))
            .count();
        report.extractive_rate = Some(extractive as f64 / results.len() as f64);
        let pairs: Vec<(String, String)> = results
            .iter()
            .filter_map(|r| {
                by_id
                    .get(r.example_id.as_str())
                    .map(|e| (e.passage.clone(), r.rationale.clone()))
            })
            .collect();
        report.compression = Some(eval::compression_report(&pairs, counter.as_ref())?);
        let texts: Vec<markup::MarkedText> = results
            .iter()
            .filter_map(|r| markup::parse_marked(&r.marked_passage).ok())
            .collect();
        if !texts.is_empty() {
            report.markup = Some(markup::markup_stats(
                &texts,
                &settings.rules,
                counter.as_ref(),
            )?);
        }
    }

    // Well-formedness needs the per-sentence flags.
    if let Some(path) = marked_path {
        let marked: Vec<MarkedRecord> = corpus::read_records(path)?;
        let passages: Vec<&MarkedPassage> = marked.iter().map(|m| &m.passage).collect();
        report.well_formedness = eval::well_formedness(&passages);
    }

    // Entailment consistency, when an NLI backend is configured.
    if settings.has_backend("nli") {
        let nli = CompletionNli::new(settings.backend("nli")?);
        let items: Vec<EntailmentItem> = results
            .iter()
            .filter_map(|r| {
                by_id.get(r.example_id.as_str()).map(|e| EntailmentItem {
                    rationale: r.rationale.clone(),
                    question: e.question.clone(),
                    answer: r.answer.clone(),
                })
            })
            .collect();
        report.entailment = Some(entailment_rate(
            &items,
            &nli,
            settings.seed,
            settings.parallelism,
        ));
    }

    // Decontextualization quality against inline references.
    if let (Some(marked_path), Some(refs_path)) = (marked_path, refs_path) {
        let marked: Vec<MarkedRecord> = corpus::read_records(marked_path)?;
        let refs: Vec<DecontextRef> = corpus::read_records(refs_path)?;
        let marked_by_id: BTreeMap<&str, &MarkedRecord> =
            marked.iter().map(|m| (m.example_id.as_str(), m)).collect();
        let mut predictions = Vec::new();
        let mut sources = Vec::new();
        let mut references = Vec::new();
        for r in &refs {
            let Some(m) = marked_by_id.get(r.example_id.as_str()) else {
                continue;
            };
            let Some(sentence) = m.passage.sentences.get(r.sentence) else {
                continue;
            };
            predictions.push(sentence.marked.clone());
            sources.push(sentence.original.clone());
            references.push(r.references.clone());
        }
        if !predictions.is_empty() {
            let quality = decontext_quality(
                &predictions,
                &sources,
                &references,
                InlineMode::Parenthetical,
            )?;
            report.decontext_quality = Some(quality.mean);
        }
    }

    let out = out_file(settings, "report.json");
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    let mut counts = BTreeMap::new();
    counts.insert("results".to_string(), results.len() as u64);
    write_stage_manifest(
        settings,
        &out,
        counts,
        "none",
        &[("results", results_path), ("dataset", dataset_path)],
    )?;
    print!("{}", render_report(&report));
    println!("-> {}", out.display());
    Ok(())
}

fn perturb(
    settings: &Settings,
    dataset_path: &Path,
    pool_path: Option<&Path>,
    map_path: &Path,
    invert: bool,
) -> Result<()> {
    let dataset = load_native(dataset_path)?;
    if invert {
        let map: Vec<PerturbRecord> = corpus::read_records(map_path)?;
        let restored = eval::invert_perturbation(&dataset, &map);
        let out = out_file(settings, "restored.jsonl");
        corpus::write_records(&restored.examples, &out)?;
        println!("inverted {} examples -> {}", restored.len(), out.display());
        return Ok(());
    }
    let pool_path = pool_path.ok_or_else(|| anyhow::anyhow!("--pool is required without --invert"))?;
    let pool_text = std::fs::read_to_string(pool_path)
        .with_context(|| format!("reading {}", pool_path.display()))?;
    let pool = eval::EntityPool::from_json(&pool_text)?;
    let ner = CompletionNer::new(settings.backend("ner")?);
    let outcome = perturb_entities(&dataset, &ner, &pool, settings.seed, settings.parallelism)?;
    let out = out_file(settings, "perturbed.jsonl");
    corpus::write_records(&outcome.dataset.examples, &out)?;
    corpus::write_records(&outcome.map, map_path)?;
    for (id, reason) in &outcome.skipped {
        eprintln!("skipped {id}: {reason}");
    }
    let mut counts = BTreeMap::new();
    counts.insert("examples".to_string(), outcome.dataset.len() as u64);
    counts.insert("perturbed".to_string(), outcome.map.len() as u64);
    counts.insert("skipped".to_string(), outcome.skipped.len() as u64);
    write_stage_manifest(settings, &out, counts, "ner", &[("dataset", dataset_path)])?;
    println!(
        "perturbed {} of {} examples ({} skipped) -> {}, map -> {}",
        outcome.map.len(),
        outcome.dataset.len(),
        outcome.skipped.len(),
        out.display(),
        map_path.display()
    );
    Ok(())
}

