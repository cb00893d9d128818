//! Synthetic SLU corpora, manifests, target serialization and scoring.

pub mod manifest;
pub mod metrics;
pub mod synth;
pub mod tags;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featpipe::FeatureError;

pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use metrics::{intent_accuracy, label_f1, word_error_rate, F1Mode, ScoredResult};
pub use synth::{generate_corpus, SynthConfig, SynthCorpus, SynthTask, Utterance};
pub use tags::{parse_tagged, serialize_slu_targets, slu_symbols, strip_tags, IntentPlacement, ParsedTags};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("entity spans overlap in {0:?}")]
    OverlappingEntities(String),
    #[error("entity span {start}..{end} outside {n_words} words in {id:?}")]
    SpanOutOfRange {
        id: String,
        start: usize,
        end: usize,
        n_words: usize,
    },
    #[error("hypothesis and reference ids differ: {0}")]
    IdMismatch(String),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Typed word span `[start, end)` over the whitespace-split transcript.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    #[serde(rename = "type")]
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SluLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<EntitySpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialog_acts: Option<Vec<String>>,
}

impl SluLabels {
    pub fn is_empty(&self) -> bool {
        self.intent.is_none() && self.entities.is_empty() && self.dialog_acts.is_none()
    }

    /// Entity spans must sit inside the transcript and must not overlap.
    pub fn validate(&self, id: &str, transcript: &str) -> Result<(), CorpusError> {
        let n_words = transcript.split_whitespace().count();
        let mut spans: Vec<&EntitySpan> = self.entities.iter().collect();
        spans.sort_by_key(|e| (e.start, e.end));
        for e in &spans {
            if e.start >= e.end || e.end > n_words {
                return Err(CorpusError::SpanOutOfRange {
                    id: id.to_string(),
                    start: e.start,
                    end: e.end,
                    n_words,
                });
            }
        }
        if spans.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(CorpusError::OverlappingEntities(id.to_string()));
        }
        Ok(())
    }
}
