//! Dataset ingestion and line-delimited record persistence.
//!
//! All pipeline artifacts are UTF-8 JSONL: one object per line, field
//! names fixed by the record types here. Serialization is the external
//! contract, so the serde field names are part of the schema.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markup::MarkedText;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("line {line}: duplicate example id {id:?}")]
    DuplicateId { line: usize, id: String },
}

/// One open-book QA instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub passage: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub source: String,
}

impl QAExample {
    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.question.is_empty() {
            return Err(format!("example {:?} has an empty question", self.id));
        }
        if self.passage.is_empty() {
            return Err(format!("example {:?} has an empty passage", self.id));
        }
        if self.gold_answers.is_empty() {
            return Err(format!("example {:?} has no gold answers", self.id));
        }
        Ok(())
    }
}

/// A loaded dataset. Example ids are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QADataset {
    pub examples: Vec<QAExample>,
}

impl QADataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QAExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Draw `n` examples without replacement using a seeded RNG. Order of
    /// the sample follows the shuffled draw; the seed makes it
    /// reproducible.
    pub fn sample(&self, n: usize, seed: u64) -> QADataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut examples = self.examples.clone();
        examples.shuffle(&mut rng);
        examples.truncate(n);
        QADataset { examples }
    }
}

/// Supported input dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// The shared-task layout: one passage per line with a `qas` array;
    /// an optional leading header line is skipped.
    MrqaJsonl,
    /// One [`QAExample`] object per line.
    NativeJsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mrqa-jsonl" | "mrqa" => Ok(Self::MrqaJsonl),
            "native-jsonl" | "native" => Ok(Self::NativeJsonl),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

#[derive(Debug, Deserialize)]
struct MrqaAnswerObj {
    text: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum MrqaAnswer {
    Text(String),
    Object(MrqaAnswerObj),
}

#[derive(Debug, Deserialize)]
struct MrqaQa {
    #[serde(alias = "id")]
    qid: String,
    question: String,
    answers: Vec<MrqaAnswer>,
}

#[derive(Debug, Deserialize)]
struct MrqaLine {
    context: String,
    qas: Vec<MrqaQa>,
}

#[derive(Debug, Deserialize)]
struct MrqaHeader {
    header: MrqaHeaderBody,
}

#[derive(Debug, Deserialize)]
struct MrqaHeaderBody {
    #[serde(default)]
    dataset: Option<String>,
}

/// A line that failed to load, with the reason.
#[derive(Debug, Clone)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Load a dataset, failing on the first malformed line.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<QADataset, CorpusError> {
    let (dataset, errors) = load_dataset_lenient(path, format)?;
    if let Some(e) = errors.into_iter().next() {
        return Err(CorpusError::Line {
            line: e.line,
            message: e.message,
        });
    }
    Ok(dataset)
}

/// Load a dataset, collecting per-line errors instead of failing. Every
/// non-empty input line is either consumed into examples or reported in
/// the error list; nothing is silently dropped.
pub fn load_dataset_lenient(
    path: &Path,
    format: DatasetFormat,
) -> Result<(QADataset, Vec<LineError>), CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut examples = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let mut source_tag = String::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Open {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            DatasetFormat::NativeJsonl => match serde_json::from_str::<QAExample>(&line) {
                Ok(ex) => push_example(ex, line_no, &mut seen, &mut examples, &mut errors),
                Err(e) => errors.push(LineError {
                    line: line_no,
                    message: format!("malformed record: {e}"),
                }),
            },
            DatasetFormat::MrqaJsonl => {
                if line_no == 1 {
                    if let Ok(h) = serde_json::from_str::<MrqaHeader>(&line) {
                        source_tag = h.header.dataset.unwrap_or_default();
                        continue;
                    }
                }
                match serde_json::from_str::<MrqaLine>(&line) {
                    Ok(parsed) => {
                        for qa in parsed.qas {
                            let ex = QAExample {
                                id: qa.qid,
                                question: qa.question,
                                passage: parsed.context.clone(),
                                gold_answers: qa
                                    .answers
                                    .into_iter()
                                    .map(|a| match a {
                                        MrqaAnswer::Text(t) => t,
                                        MrqaAnswer::Object(o) => o.text,
                                    })
                                    .collect(),
                                source: if source_tag.is_empty() {
                                    "mrqa".into()
                                } else {
                                    source_tag.clone()
                                },
                            };
                            push_example(ex, line_no, &mut seen, &mut examples, &mut errors);
                        }
                    }
                    Err(e) => errors.push(LineError {
                        line: line_no,
                        message: format!("malformed record: {e}"),
                    }),
                }
            }
        }
    }
    Ok((QADataset { examples }, errors))
}

fn push_example(
    ex: QAExample,
    line: usize,
    seen: &mut HashSet<String>,
    examples: &mut Vec<QAExample>,
    errors: &mut Vec<LineError>,
) {
    if let Err(message) = ex.validate() {
        errors.push(LineError { line, message });
        return;
    }
    if !seen.insert(ex.id.clone()) {
        errors.push(LineError {
            line,
            message: format!("duplicate example id {:?}", ex.id),
        });
        return;
    }
    examples.push(ex);
}

/// Write records as JSONL, one per line. Returns the number written.
pub fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<usize, CorpusError> {
    let file = File::create(path).map_err(|source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Write {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        writeln!(w, "{line}").map_err(|source| CorpusError::Write {
            path: path.display().to_string(),
            source,
        })?;
    }
    w.flush().map_err(|source| CorpusError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(records.len())
}

/// Load JSONL records of any deserializable type, with line numbers in
/// errors.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Open {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// One sentence of a teacher-annotated passage: the original surface
/// form, the decontextualized (marked) form, and whether the markup left
/// the original text intact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSentence {
    pub original: String,
    pub marked: String,
    pub well_formed: bool,
}

/// A passage with per-sentence decontextualizing markup plus the merged
/// surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedPassage {
    pub text: String,
    pub sentences: Vec<MarkedSentence>,
}

impl MarkedPassage {
    /// Parse the merged surface form into plain text and spans.
    pub fn marked_text(&self) -> Result<MarkedText, crate::markup::MarkupError> {
        crate::markup::parse_marked(&self.text)
    }
}

/// Per-question artifact of the teacher chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub example_id: String,
    pub marked_passage: MarkedPassage,
    pub cot_rationale: String,
    pub cot_answer: String,
    pub validated_answer: String,
    pub cot_f1: f64,
    pub validated_f1: f64,
    pub kept: bool,
}
