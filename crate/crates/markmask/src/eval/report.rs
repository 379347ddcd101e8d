//! Structured evaluation reports and their human-readable rendering.

use serde::{Deserialize, Serialize};

use super::decontext::SariScore;
use super::entailment::EntailmentReport;
use super::SelectiveReport;
use crate::markup::MarkupStats;

/// Overall accuracy of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemAccuracy {
    pub system: String,
    pub em: f64,
    pub f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub per_example_mean: f64,
    pub pooled: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellFormedReport {
    pub sentence_rate: f64,
    pub passage_rate: f64,
    pub sentences: usize,
    pub passages: usize,
}

/// Everything the evaluation stage can produce. Sections are optional
/// because they depend on which inputs and backends a run had.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub systems: Vec<SystemAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selective: Option<SelectiveReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment: Option<EntailmentReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractive_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<CompressionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markup: Option<MarkupStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub well_formedness: Option<WellFormedReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decontext_quality: Option<SariScore>,
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

/// Render the report as the plain-text tables operators read.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    if !report.systems.is_empty() {
        out.push_str("== Answer accuracy ==\n");
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8}\n",
            "system", "EM", "F1", "n"
        ));
        for s in &report.systems {
            out.push_str(&format!(
                "{:<16} {:>8.1} {:>8.1} {:>8}\n",
                s.system,
                s.em * 100.0,
                s.f1 * 100.0,
                s.count
            ));
        }
        out.push('\n');
    }
    if let Some(sel) = &report.selective {
        out.push_str("== Selective prediction (end-to-end answer, by agreement) ==\n");
        out.push_str(&format!(
            "agreement: {} of {} examples\n",
            pct(sel.agree_fraction),
            sel.total
        ));
        if let Some(a) = &sel.agree {
            out.push_str(&format!(
                "  agree    EM {:>5.1}  F1 {:>5.1}  (n={})\n",
                a.em * 100.0,
                a.f1 * 100.0,
                a.count
            ));
        }
        if let Some(d) = &sel.disagree {
            out.push_str(&format!(
                "  disagree EM {:>5.1}  F1 {:>5.1}  (n={})\n",
                d.em * 100.0,
                d.f1 * 100.0,
                d.count
            ));
        }
        out.push('\n');
    }
    if let Some(e) = &report.entailment {
        out.push_str("== Rationale consistency ==\n");
        out.push_str(&format!(
            "entailment rate: {}  (shuffled control: {}, n={}, errors={})\n\n",
            pct(e.entail_rate),
            pct(e.shuffled_entail_rate),
            e.evaluated,
            e.errors
        ));
    }
    if report.extractive_rate.is_some() || report.compression.is_some() {
        out.push_str("== Extractiveness and compression ==\n");
        if let Some(x) = report.extractive_rate {
            out.push_str(&format!("extractive rationales: {}\n", pct(x)));
        }
        if let Some(c) = &report.compression {
            out.push_str(&format!(
                "compression: {:.1}x per-example mean ({:.1}x pooled, n={})\n",
                c.per_example_mean, c.pooled, c.examples
            ));
        }
        out.push('\n');
    }
    if let Some(m) = &report.markup {
        out.push_str("== Markup ==\n");
        out.push_str(&format!(
            "{:.1} spans/sentence, {:.1} spans/document over {} documents\n",
            m.spans_per_sentence, m.spans_per_document, m.documents
        ));
        if let (Some(mean), Some(median)) = (m.tokens_per_span_mean, m.tokens_per_span_median) {
            out.push_str(&format!(
                "{mean:.1} tokens/span (median {median:.1})\n"
            ));
        }
        out.push('\n');
    }
    if let Some(w) = &report.well_formedness {
        out.push_str("== Well-formedness ==\n");
        out.push_str(&format!(
            "{} of sentences, {} of passages fully well-formed\n\n",
            pct(w.sentence_rate),
            pct(w.passage_rate)
        ));
    }
    if let Some(d) = &report.decontext_quality {
        out.push_str("== Decontextualization quality ==\n");
        out.push_str(&format!(
            "score {:.3} (keep {:.3} / add {:.3} / delete {:.3})\n",
            d.sari, d.keep_f1, d.add_f1, d.delete_f1
        ));
    }
    if out.is_empty() {
        out.push_str("(empty report)\n");
    }
    out
}
