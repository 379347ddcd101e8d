//! Property tests for the structural invariants.

use proptest::prelude::*;

use markmask::corpus::QAExample;
use markmask::eval;
use markmask::markup::{self, MarkedText, MarkupSpan};
use markmask::segment::{self, ProtectionRules};

fn text_with_controls() -> impl Strategy<Value = String> {
    // Arbitrary unicode plus explicit control characters, the awkward
    // cases for line-delimited storage.
    proptest::collection::vec(
        prop_oneof![
            any::<char>(),
            Just('\n'),
            Just('\r'),
            Just('\t'),
            Just('\u{0}'),
            Just('"'),
            Just('\\'),
        ],
        0..40,
    )
    .prop_map(|chars| chars.into_iter().collect())
}

proptest! {
    #[test]
    fn record_serialization_round_trips(
        id in "[a-z0-9-]{1,12}",
        question in text_with_controls(),
        passage in text_with_controls(),
        answer in text_with_controls(),
    ) {
        let example = QAExample {
            id,
            question,
            passage,
            gold_answers: vec![answer],
            source: "prop".into(),
        };
        let line = serde_json::to_string(&example).unwrap();
        prop_assert!(!line.contains('\n'));
        let back: QAExample = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, example);
    }
}

fn plain_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            proptest::char::range('a', 'z'),
            proptest::char::range('A', 'Z'),
            Just(' '),
            Just('.'),
            Just(','),
            Just('é'),
            Just('ß'),
        ],
        0..50,
    )
    .prop_map(|chars| chars.into_iter().collect())
}

fn marked_text() -> impl Strategy<Value = MarkedText> {
    (plain_text(), proptest::collection::vec(("[a-zA-Z0-9 ]{1,8}", 0..100usize), 0..4)).prop_map(
        |(plain, raw_spans)| {
            let n = plain.chars().count();
            let mut spans: Vec<MarkupSpan> = raw_spans
                .into_iter()
                .map(|(content, pos)| MarkupSpan {
                    insert_after: pos % (n + 1),
                    content,
                })
                .collect();
            spans.sort_by_key(|s| s.insert_after);
            MarkedText { plain, spans }
        },
    )
}

proptest! {
    #[test]
    fn parse_render_identity(m in marked_text()) {
        let rendered = markup::render(&m).unwrap();
        let reparsed = markup::parse_marked(&rendered).unwrap();
        prop_assert_eq!(&reparsed, &m);
        prop_assert_eq!(markup::strip(&rendered).unwrap(), m.plain);
    }

    #[test]
    fn strip_is_idempotent_and_self_well_formed(m in marked_text()) {
        let rendered = markup::render(&m).unwrap();
        let once = markup::strip(&rendered).unwrap();
        prop_assert_eq!(markup::strip(&once).unwrap(), once.clone());
        prop_assert!(markup::is_well_formed(&rendered, &once).well_formed);
    }
}

fn prose() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just("Dr. Smith arrived"),
            Just("J. R. R. Tolkien wrote"),
            Just("the river ran east"),
            Just("No. 7 was empty"),
            Just("she said \"stop\""),
            Just("it was 3.14 exactly"),
            Just("Καλημέρα to all"),
        ],
        1..6,
    )
    .prop_map(|clauses| {
        let mut out = String::new();
        for (i, c) in clauses.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(c);
            out.push('.');
        }
        out
    })
}

proptest! {
    #[test]
    fn segmentation_reconstructs_and_stays_clean(text in prose()) {
        let rules = ProtectionRules::default();
        let sentences = segment::segment(&text, &rules).unwrap();
        let chars: Vec<char> = text.chars().collect();

        let mut prev_end = 0usize;
        for s in &sentences {
            prop_assert!(s.start >= prev_end, "overlapping offsets");
            prop_assert!(s.end > s.start);
            let slice: String = chars[s.start..s.end].iter().collect();
            prop_assert_eq!(&slice, &s.text);
            prop_assert!(!s.text.contains(segment::PLACEHOLDER));
            let gap: String = chars[prev_end..s.start].iter().collect();
            prop_assert!(gap.chars().all(char::is_whitespace));
            prev_end = s.end;
        }
        let tail: String = chars[prev_end..].iter().collect();
        prop_assert!(tail.chars().all(char::is_whitespace));
    }

    #[test]
    fn protection_reverts_to_identity(text in prose()) {
        let rules = ProtectionRules::default();
        let (protected, edits) = segment::protect(&text, &rules).unwrap();
        prop_assert_eq!(segment::revert(&protected, &edits), text);
    }
}

proptest! {
    #[test]
    fn extractiveness_ignores_punctuation_and_whitespace_edits(
        seed_spaces in proptest::collection::vec(0..4usize, 8),
        punct in proptest::sample::select(vec!["", ".", ",", "!", "\"", "  "]),
    ) {
        let passage = "The grieving goddess [Astarte] revived Eshmun and made him a god.";
        // Perturb a verbatim rationale with extra whitespace and stray
        // punctuation; extractiveness must be unaffected.
        let words = ["The", "grieving", "goddess", "[Astarte]", "revived", "Eshmun"];
        let mut rationale = String::new();
        for (w, extra) in words.iter().zip(seed_spaces.iter().cycle()) {
            rationale.push_str(w);
            rationale.push_str(punct);
            for _ in 0..*extra {
                rationale.push(' ');
            }
            rationale.push(' ');
        }
        prop_assert!(eval::extractiveness(&rationale, passage));
    }

    #[test]
    fn answer_f1_is_symmetric_in_token_multisets(
        a in proptest::collection::vec("[a-c]{1,3}", 0..6),
        b in proptest::collection::vec("[a-c]{1,3}", 0..6),
    ) {
        let pred = a.join(" ");
        let gold = b.join(" ");
        let ab = eval::score_answer(&pred, &[gold.clone()]);
        let ba = eval::score_answer(&gold, &[pred]);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
    }
}
