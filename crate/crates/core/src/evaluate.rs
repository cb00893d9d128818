//! Greedy decoding of example sets and metric reporting.

use crate::corpus::{intent_accuracy, label_f1, word_error_rate, CorpusError, F1Mode, ScoredResult};
use crate::network::Model;
use crate::symbols::{detokenize, SymbolSet};
use crate::trainer::{Example, FeatureContext, TrainError};
use crate::transducer::greedy_decode;

/// Emission cap per encoder frame during greedy search.
pub const MAX_SYMBOLS_PER_FRAME: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    IntentAccuracy,
    DialogActF1,
    EntityF1,
    Wer,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::IntentAccuracy => "intent_accuracy",
            Metric::DialogActF1 => "dialog_act_f1",
            Metric::EntityF1 => "entity_f1",
            Metric::Wer => "wer",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "intent" | "intent_accuracy" => Ok(Metric::IntentAccuracy),
            "dialog_act" | "dialog_act_f1" | "da" => Ok(Metric::DialogActF1),
            "entity" | "entity_f1" => Ok(Metric::EntityF1),
            "wer" => Ok(Metric::Wer),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// `(id, tagged hypothesis)` for every example.
pub fn decode_examples(
    model: &Model,
    examples: &[Example],
    ctx: &FeatureContext,
    output: &SymbolSet,
) -> Result<Vec<(String, String)>, TrainError> {
    examples
        .iter()
        .map(|ex| {
            let f = ctx.eval_features(ex)?;
            let ids = greedy_decode(model, &f, MAX_SYMBOLS_PER_FRAME).map_err(crate::network::NetworkError::from)?;
            Ok((ex.id.clone(), detokenize(&ids, output)))
        })
        .collect()
}

/// `(id, tagged reference)` from the examples' targets.
pub fn references(examples: &[Example], output: &SymbolSet) -> Vec<(String, String)> {
    examples
        .iter()
        .map(|ex| (ex.id.clone(), detokenize(&ex.target, output)))
        .collect()
}

/// Scores hypotheses. Percentages for accuracy and WER, F1 reported ×100.
pub fn score(
    hyps: &[(String, String)],
    refs: &[(String, String)],
    metrics: &[Metric],
    config_hash: &str,
) -> Result<Vec<ScoredResult>, CorpusError> {
    if refs.is_empty() {
        return Err(CorpusError::Manifest {
            line: 0,
            msg: "empty test set".into(),
        });
    }
    metrics
        .iter()
        .map(|&m| {
            let value = match m {
                Metric::IntentAccuracy => intent_accuracy(hyps, refs)?,
                Metric::DialogActF1 => 100.0 * label_f1(hyps, refs, F1Mode::Multilabel)?,
                Metric::EntityF1 => 100.0 * label_f1(hyps, refs, F1Mode::Entity)?,
                Metric::Wer => word_error_rate(hyps, refs)?,
            };
            Ok(ScoredResult {
                metric: m.name().to_string(),
                value,
                n_utts: refs.len(),
                config_hash: config_hash.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_reports_each_metric() {
        let refs = vec![("a".to_string(), "⟦INTENT_x⟧hi there".to_string())];
        let hyps = vec![("a".to_string(), "⟦INTENT_x⟧hi their".to_string())];
        let r = score(&hyps, &refs, &[Metric::IntentAccuracy, Metric::Wer], "abc").unwrap();
        assert_eq!(r[0].metric, "intent_accuracy");
        assert_eq!(r[0].value, 100.0);
        assert_eq!(r[1].value, 50.0);
        assert_eq!(r[1].n_utts, 1);
        assert_eq!(r[1].config_hash, "abc");
        assert!(score(&[], &[], &[Metric::Wer], "").is_err());
    }
}
