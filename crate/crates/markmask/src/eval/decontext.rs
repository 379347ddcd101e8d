//! Decontextualization quality against inline-rewrite references.
//!
//! Reference datasets for this task replace references inline rather than
//! annotating them, so markup predictions are first converted to an
//! inline form. Scoring is an edit-based decomposition over n-grams
//! (n = 1..4) of the source, prediction, and references:
//!
//! * keep: n-grams retained from the source, vs those the references
//!   retain;
//! * add: n-grams introduced by the prediction, vs those the references
//!   introduce;
//! * delete: n-grams dropped by the prediction, vs those the references
//!   drop.
//!
//! Each operation gets an F1 per n; multi-reference counts are averaged
//! fractionally across references. An operation with nothing to do on
//! either side (for instance additions when neither prediction nor
//! references add anything) counts as perfect. The overall score is the
//! mean of the three operation F1s averaged over n.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::markup::{parse_marked, MarkedText};

use std::collections::BTreeMap;

/// How markup spans are spliced into inline form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InlineMode {
    /// `she [Astarte]` becomes `she (Astarte)`.
    Parenthetical,
    /// `she [Astarte]` becomes `Astarte`: the span content replaces the
    /// word immediately before its anchor. Approximate, but closer to
    /// reference datasets that substitute references outright.
    Replace,
}

/// Convert marked text to an inline rewrite.
pub fn markup_to_inline(m: &MarkedText, mode: InlineMode) -> String {
    let chars: Vec<char> = m.plain.chars().collect();
    match mode {
        InlineMode::Parenthetical => {
            let mut out = String::new();
            let mut spans = m.spans.iter().peekable();
            for (pos, ch) in chars.iter().enumerate() {
                while spans.peek().is_some_and(|s| s.insert_after == pos) {
                    let s = spans.next().unwrap();
                    out.push_str(" (");
                    out.push_str(&s.content);
                    out.push(')');
                }
                out.push(*ch);
            }
            for s in spans {
                out.push_str(" (");
                out.push_str(&s.content);
                out.push(')');
            }
            out
        }
        InlineMode::Replace => {
            let mut chars = chars;
            for span in m.spans.iter().rev() {
                let anchor = span.insert_after.min(chars.len());
                let mut word_start = anchor;
                while word_start > 0 && chars[word_start - 1].is_alphanumeric() {
                    word_start -= 1;
                }
                let replacement: Vec<char> = span.content.chars().collect();
                if word_start == anchor {
                    // No word to replace; splice the content in after a space.
                    let mut insert = vec![' '];
                    insert.extend(replacement);
                    chars.splice(anchor..anchor, insert);
                } else {
                    chars.splice(word_start..anchor, replacement);
                }
            }
            chars.into_iter().collect()
        }
    }
}

/// Component scores of one rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SariScore {
    pub keep_f1: f64,
    pub add_f1: f64,
    pub delete_f1: f64,
    pub sari: f64,
}

const MAX_N: usize = 4;

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

type Grams = BTreeMap<String, f64>;

fn ngrams(tokens: &[String], n: usize, weight: f64) -> Grams {
    let mut out = Grams::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *out.entry(w.join("\u{1f}")).or_insert(0.0) += weight;
        }
    }
    out
}

fn merge_into(acc: &mut Grams, other: &Grams) {
    for (k, v) in other {
        *acc.entry(k.clone()).or_insert(0.0) += v;
    }
}

fn clamped_sub(a: &Grams, b: &Grams) -> Grams {
    let mut out = Grams::new();
    for (k, &va) in a {
        let d = va - b.get(k).copied().unwrap_or(0.0);
        if d > 0.0 {
            out.insert(k.clone(), d);
        }
    }
    out
}

fn elementwise_min(a: &Grams, b: &Grams) -> Grams {
    let mut out = Grams::new();
    for (k, &va) in a {
        if let Some(&vb) = b.get(k) {
            let m = va.min(vb);
            if m > 0.0 {
                out.insert(k.clone(), m);
            }
        }
    }
    out
}

fn total(g: &Grams) -> f64 {
    g.values().sum()
}

fn pr_f1(matched: f64, sys: f64, target: f64) -> f64 {
    if sys == 0.0 && target == 0.0 {
        return 1.0;
    }
    let p = if sys == 0.0 { 1.0 } else { matched / sys };
    let r = if target == 0.0 { 1.0 } else { matched / target };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Score one rewrite against its source and references.
pub fn sari(source: &str, prediction: &str, references: &[&str]) -> SariScore {
    let s_tokens = tokens(source);
    let p_tokens = tokens(prediction);
    let numref = references.len().max(1) as f64;

    let mut keep_sum = 0.0;
    let mut add_sum = 0.0;
    let mut del_sum = 0.0;
    for n in 1..=MAX_N {
        let s = ngrams(&s_tokens, n, 1.0);
        let p = ngrams(&p_tokens, n, 1.0);
        let mut r = Grams::new();
        for reference in references {
            merge_into(&mut r, &ngrams(&tokens(reference), n, 1.0 / numref));
        }

        let kept = elementwise_min(&s, &p);
        let keep_target = elementwise_min(&s, &r);
        keep_sum += pr_f1(
            total(&elementwise_min(&kept, &keep_target)),
            total(&kept),
            total(&keep_target),
        );

        let added = clamped_sub(&p, &s);
        let add_target = clamped_sub(&r, &s);
        add_sum += pr_f1(
            total(&elementwise_min(&added, &add_target)),
            total(&added),
            total(&add_target),
        );

        let deleted = clamped_sub(&s, &p);
        let del_target = clamped_sub(&s, &r);
        del_sum += pr_f1(
            total(&elementwise_min(&deleted, &del_target)),
            total(&deleted),
            total(&del_target),
        );
    }

    let keep_f1 = keep_sum / MAX_N as f64;
    let add_f1 = add_sum / MAX_N as f64;
    let delete_f1 = del_sum / MAX_N as f64;
    SariScore {
        keep_f1,
        add_f1,
        delete_f1,
        sari: (keep_f1 + add_f1 + delete_f1) / 3.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecontextQualityReport {
    pub per_example: Vec<SariScore>,
    pub mean: SariScore,
}

/// Score marked predictions against sources and inline references.
/// Predictions are converted to inline form first; unparseable
/// predictions are scored as raw text.
pub fn decontext_quality(
    predictions: &[String],
    sources: &[String],
    references: &[Vec<String>],
    mode: InlineMode,
) -> Result<DecontextQualityReport, EvalError> {
    if predictions.len() != sources.len() || sources.len() != references.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} predictions, {} sources, {} reference sets",
            predictions.len(),
            sources.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(EvalError::LengthMismatch("no examples".into()));
    }
    let per_example: Vec<SariScore> = predictions
        .iter()
        .zip(sources)
        .zip(references)
        .map(|((pred, source), refs)| {
            let inline = match parse_marked(pred) {
                Ok(m) => markup_to_inline(&m, mode),
                Err(_) => pred.clone(),
            };
            let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
            sari(source, &inline, &refs)
        })
        .collect();
    let n = per_example.len() as f64;
    let mean = SariScore {
        keep_f1: per_example.iter().map(|s| s.keep_f1).sum::<f64>() / n,
        add_f1: per_example.iter().map(|s| s.add_f1).sum::<f64>() / n,
        delete_f1: per_example.iter().map(|s| s.delete_f1).sum::<f64>() / n,
        sari: per_example.iter().map(|s| s.sari).sum::<f64>() / n,
    };
    Ok(DecontextQualityReport { per_example, mean })
}
