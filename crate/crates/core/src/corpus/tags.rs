//! SLU targets as bracket tags inside transcripts.
//!
//! * intent: `⟦INTENT_name⟧`, first (default) or last
//! * entity: `⟦B-type⟧words ⟦E⟧`
//! * dialog act: `⟦DA_name⟧`, one per act, appended

use std::collections::BTreeSet;

use super::{CorpusError, EntitySpan, SluLabels};
use crate::symbols::{TAG_CLOSE, TAG_OPEN};

pub const INTENT_PREFIX: &str = "INTENT_";
pub const ENTITY_BEGIN_PREFIX: &str = "B-";
pub const ENTITY_END: &str = "E";
pub const DIALOG_ACT_PREFIX: &str = "DA_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IntentPlacement {
    #[default]
    First,
    Last,
}

impl std::str::FromStr for IntentPlacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first" | "intent-first" => Ok(Self::First),
            "last" | "intent-last" => Ok(Self::Last),
            other => Err(format!("unknown intent placement {other:?}")),
        }
    }
}

fn tag(name: &str) -> String {
    format!("{TAG_OPEN}{name}{TAG_CLOSE}")
}

/// Writes `labels` into `transcript` as bracket tags.
pub fn serialize_slu_targets(
    transcript: &str,
    labels: &SluLabels,
    placement: IntentPlacement,
) -> Result<String, CorpusError> {
    labels.validate("", transcript)?;
    let words: Vec<&str> = transcript.split_whitespace().collect();
    if labels.is_empty() {
        return Ok(transcript.to_string());
    }
    let mut out = String::new();
    let intent = labels.intent.as_ref().map(|i| tag(&format!("{INTENT_PREFIX}{i}")));
    if placement == IntentPlacement::First {
        if let Some(t) = &intent {
            out.push_str(t);
        }
    }
    for (w, word) in words.iter().enumerate() {
        if w > 0 {
            out.push(' ');
        }
        if labels.entities.iter().any(|e| e.end == w) {
            out.push_str(&tag(ENTITY_END));
        }
        if let Some(e) = labels.entities.iter().find(|e| e.start == w) {
            out.push_str(&tag(&format!("{ENTITY_BEGIN_PREFIX}{}", e.kind)));
        }
        out.push_str(word);
    }
    if labels.entities.iter().any(|e| e.end == words.len()) {
        out.push(' ');
        out.push_str(&tag(ENTITY_END));
    }
    if let Some(acts) = &labels.dialog_acts {
        for a in acts {
            out.push_str(&tag(&format!("{DIALOG_ACT_PREFIX}{a}")));
        }
    }
    if placement == IntentPlacement::Last {
        if let Some(t) = &intent {
            out.push_str(t);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ParsedTags {
    pub words: Vec<String>,
    /// Intent names in decode order.
    pub intents: Vec<String>,
    /// Well-formed entity spans over `words`.
    pub entities: Vec<EntitySpan>,
    pub dialog_acts: BTreeSet<String>,
}

impl ParsedTags {
    pub fn first_intent(&self) -> Option<&str> {
        self.intents.first().map(String::as_str)
    }

    /// `(type, surface string)` tuples for entity scoring.
    pub fn entity_tuples(&self) -> Vec<(String, String)> {
        self.entities
            .iter()
            .map(|e| (e.kind.clone(), self.words[e.start..e.end].join(" ")))
            .collect()
    }

    pub fn transcript(&self) -> String {
        self.words.join(" ")
    }

    /// Labels in record form; the inverse of [`serialize_slu_targets`].
    pub fn labels(&self) -> SluLabels {
        SluLabels {
            intent: self.intents.first().cloned(),
            entities: self.entities.clone(),
            dialog_acts: None,
        }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Tag(&'a str),
}

fn pieces(s: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find(TAG_OPEN) {
        if open > 0 {
            out.push(Piece::Text(&rest[..open]));
        }
        let after = &rest[open + TAG_OPEN.len_utf8()..];
        match after.find(TAG_CLOSE) {
            Some(close) => {
                out.push(Piece::Tag(&after[..close]));
                rest = &after[close + TAG_CLOSE.len_utf8()..];
            }
            None => {
                // Unterminated tag: drop it.
                rest = "";
            }
        }
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    out
}

/// Parses a tagged string. Malformed entity brackets (unopened `⟦E⟧`,
/// nested or unterminated `⟦B-…⟧`, empty spans) are dropped.
pub fn parse_tagged(s: &str) -> ParsedTags {
    let mut p = ParsedTags::default();
    let mut open: Option<(String, usize)> = None;
    let mut acts = Vec::new();
    for piece in pieces(s) {
        match piece {
            Piece::Text(t) => p.words.extend(t.split_whitespace().map(String::from)),
            Piece::Tag(name) => {
                if let Some(i) = name.strip_prefix(INTENT_PREFIX) {
                    p.intents.push(i.to_string());
                } else if let Some(a) = name.strip_prefix(DIALOG_ACT_PREFIX) {
                    acts.push(a.to_string());
                } else if let Some(kind) = name.strip_prefix(ENTITY_BEGIN_PREFIX) {
                    // A second B before E discards the first.
                    open = Some((kind.to_string(), p.words.len()));
                } else if name == ENTITY_END {
                    if let Some((kind, start)) = open.take() {
                        if p.words.len() > start {
                            p.entities.push(EntitySpan {
                                kind,
                                start,
                                end: p.words.len(),
                            });
                        }
                    }
                }
            }
        }
    }
    p.dialog_acts = acts.into_iter().collect();
    p
}

/// The transcript with every tag removed and whitespace normalized.
pub fn strip_tags(s: &str) -> String {
    parse_tagged(s).transcript()
}

/// SLU symbol names needed for a set of label records, ordered intents,
/// entity begins, entity end, dialog acts; each group sorted.
pub fn slu_symbols<'a>(labels: impl IntoIterator<Item = &'a SluLabels>) -> Vec<String> {
    let mut intents = BTreeSet::new();
    let mut kinds = BTreeSet::new();
    let mut acts = BTreeSet::new();
    for l in labels {
        if let Some(i) = &l.intent {
            intents.insert(format!("{INTENT_PREFIX}{i}"));
        }
        for e in &l.entities {
            kinds.insert(format!("{ENTITY_BEGIN_PREFIX}{}", e.kind));
        }
        if let Some(a) = &l.dialog_acts {
            acts.extend(a.iter().map(|a| format!("{DIALOG_ACT_PREFIX}{a}")));
        }
    }
    let mut out: Vec<String> = intents.into_iter().collect();
    let has_entities = !kinds.is_empty();
    out.extend(kinds);
    if has_entities {
        out.push(ENTITY_END.to_string());
    }
    out.extend(acts);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(intent: Option<&str>, entities: &[(&str, usize, usize)]) -> SluLabels {
        SluLabels {
            intent: intent.map(String::from),
            entities: entities
                .iter()
                .map(|&(k, s, e)| EntitySpan {
                    kind: k.into(),
                    start: s,
                    end: e,
                })
                .collect(),
            dialog_acts: None,
        }
    }

    #[test]
    fn no_labels_is_identity() {
        let s = serialize_slu_targets("a b", &SluLabels::default(), IntentPlacement::First).unwrap();
        assert_eq!(s, "a b");
    }

    #[test]
    fn intent_first_and_last() {
        let l = labels(Some("x"), &[]);
        assert_eq!(
            serialize_slu_targets("a b", &l, IntentPlacement::First).unwrap(),
            "⟦INTENT_x⟧a b"
        );
        assert_eq!(
            serialize_slu_targets("a b", &l, IntentPlacement::Last).unwrap(),
            "a b⟦INTENT_x⟧"
        );
    }

    #[test]
    fn entity_brackets() {
        let l = labels(None, &[("city", 1, 2)]);
        assert_eq!(
            serialize_slu_targets("to miami now", &l, IntentPlacement::First).unwrap(),
            "to ⟦B-city⟧miami ⟦E⟧now"
        );
        let l = labels(None, &[("city", 1, 3)]);
        assert_eq!(
            serialize_slu_targets("to new york", &l, IntentPlacement::First).unwrap(),
            "to ⟦B-city⟧new york ⟦E⟧"
        );
    }

    #[test]
    fn overlapping_spans_rejected() {
        let l = labels(None, &[("a", 0, 2), ("b", 1, 3)]);
        assert!(matches!(
            serialize_slu_targets("w x y z", &l, IntentPlacement::First),
            Err(CorpusError::OverlappingEntities(_))
        ));
        let l = labels(None, &[("a", 2, 5)]);
        assert!(matches!(
            serialize_slu_targets("w x", &l, IntentPlacement::First),
            Err(CorpusError::SpanOutOfRange { .. })
        ));
    }

    #[test]
    fn dialog_acts_appended() {
        let l = SluLabels {
            intent: None,
            entities: vec![],
            dialog_acts: Some(vec!["greet".into(), "ask".into()]),
        };
        let s = serialize_slu_targets("hi", &l, IntentPlacement::First).unwrap();
        assert_eq!(s, "hi⟦DA_greet⟧⟦DA_ask⟧");
        let p = parse_tagged(&s);
        assert_eq!(p.dialog_acts.len(), 2);
        assert_eq!(p.words, vec!["hi"]);
    }

    #[test]
    fn malformed_brackets_are_dropped() {
        let p = parse_tagged("⟦E⟧to ⟦B-city⟧miami ⟦B-date⟧now ⟦E⟧x ⟦B-a⟧y");
        assert_eq!(p.entity_tuples(), vec![("date".to_string(), "now".to_string())]);
        assert_eq!(p.words, vec!["to", "miami", "now", "x", "y"]);
        assert!(parse_tagged("a ⟦B-x⟧⟦E⟧b").entities.is_empty());
        assert_eq!(parse_tagged("a ⟦INTENT_q").words, vec!["a"]);
    }

    #[test]
    fn symbol_inventory_order() {
        let recs = [
            labels(Some("b"), &[("city", 0, 1)]),
            labels(Some("a"), &[("date", 0, 1)]),
        ];
        assert_eq!(
            slu_symbols(&recs),
            vec!["INTENT_a", "INTENT_b", "B-city", "B-date", "E"]
        );
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            words in proptest::collection::vec("[a-z]{1,5}", 1..8),
            intent in proptest::option::of("[a-z]{1,4}"),
            cuts in proptest::collection::vec(any::<bool>(), 8),
            placement in prop_oneof![Just(IntentPlacement::First), Just(IntentPlacement::Last)],
        ) {
            // Non-overlapping spans: consecutive word pairs where the cut flag is set.
            let mut entities = Vec::new();
            let mut w = 0;
            while w < words.len() {
                if cuts[w % cuts.len()] {
                    let end = (w + 2).min(words.len());
                    entities.push(EntitySpan { kind: format!("t{w}"), start: w, end });
                    w = end;
                } else {
                    w += 1;
                }
            }
            let l = SluLabels { intent, entities, dialog_acts: None };
            let transcript = words.join(" ");
            let s = serialize_slu_targets(&transcript, &l, placement).unwrap();
            let p = parse_tagged(&s);
            prop_assert_eq!(p.transcript(), transcript);
            prop_assert_eq!(p.labels(), l);
        }
    }
}
