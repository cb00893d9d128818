//! Corpus-level scoring over `(id, tagged string)` pairs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::tags::parse_tagged;
use super::CorpusError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Mode {
    /// Dialog-act tag sets per utterance.
    Multilabel,
    /// `(type, surface)` tuples from entity brackets.
    Entity,
}

/// One line of a scored-results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResult {
    pub metric: String,
    pub value: f64,
    pub n_utts: usize,
    pub config_hash: String,
}

/// Pairs hypotheses with references by id. Both sides must carry the same
/// id set with no duplicates.
fn align<'a>(
    hyps: &'a [(String, String)],
    refs: &'a [(String, String)],
) -> Result<Vec<(&'a str, &'a str)>, CorpusError> {
    let mut h: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, s) in hyps {
        if h.insert(id, s).is_some() {
            return Err(CorpusError::IdMismatch(format!("duplicate hypothesis id {id:?}")));
        }
    }
    let mut out = Vec::with_capacity(refs.len());
    let mut seen = BTreeSet::new();
    for (id, r) in refs {
        if !seen.insert(id.as_str()) {
            return Err(CorpusError::IdMismatch(format!("duplicate reference id {id:?}")));
        }
        match h.get(id.as_str()) {
            Some(hs) => out.push((*hs, r.as_str())),
            None => return Err(CorpusError::IdMismatch(format!("no hypothesis for {id:?}"))),
        }
    }
    if h.len() != refs.len() {
        let extra = h.keys().find(|k| !seen.contains(*k)).copied().unwrap_or_default();
        return Err(CorpusError::IdMismatch(format!("no reference for {extra:?}")));
    }
    Ok(out)
}

/// Percentage of utterances whose first decoded intent equals the
/// reference intent. A missing hypothesis intent counts as wrong.
pub fn intent_accuracy(hyps: &[(String, String)], refs: &[(String, String)]) -> Result<f64, CorpusError> {
    let pairs = align(hyps, refs)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let correct = pairs
        .iter()
        .filter(|(h, r)| {
            let h = parse_tagged(h);
            let r = parse_tagged(r);
            matches!((h.first_intent(), r.first_intent()), (Some(a), Some(b)) if a == b)
        })
        .count();
    Ok(100.0 * correct as f64 / pairs.len() as f64)
}

/// Micro-averaged F1 in [0, 1]. Two empty sides score 1.
pub fn label_f1(hyps: &[(String, String)], refs: &[(String, String)], mode: F1Mode) -> Result<f64, CorpusError> {
    let pairs = align(hyps, refs)?;
    let (mut tp, mut n_hyp, mut n_ref) = (0usize, 0usize, 0usize);
    for (h, r) in pairs {
        let (h, r) = (parse_tagged(h), parse_tagged(r));
        match mode {
            F1Mode::Multilabel => {
                tp += h.dialog_acts.intersection(&r.dialog_acts).count();
                n_hyp += h.dialog_acts.len();
                n_ref += r.dialog_acts.len();
            }
            F1Mode::Entity => {
                // Multiset intersection over tuples.
                let mut pool: BTreeMap<(String, String), usize> = BTreeMap::new();
                for t in r.entity_tuples() {
                    *pool.entry(t).or_default() += 1;
                }
                let ht = h.entity_tuples();
                for t in &ht {
                    if let Some(c) = pool.get_mut(t).filter(|c| **c > 0) {
                        *c -= 1;
                        tp += 1;
                    }
                }
                n_hyp += ht.len();
                n_ref += r.entities.len();
            }
        }
    }
    Ok(f1(tp, n_hyp, n_ref))
}

fn f1(tp: usize, n_hyp: usize, n_ref: usize) -> f64 {
    if n_hyp == 0 && n_ref == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_hyp as f64;
    let r = tp as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

/// Word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Corpus WER in percent, with SLU tags stripped from both sides.
pub fn word_error_rate(hyps: &[(String, String)], refs: &[(String, String)]) -> Result<f64, CorpusError> {
    let pairs = align(hyps, refs)?;
    let (mut errors, mut words) = (0usize, 0usize);
    for (h, r) in pairs {
        let h = parse_tagged(h).words;
        let r = parse_tagged(r).words;
        errors += edit_distance(&h, &r);
        words += r.len();
    }
    if words == 0 {
        return Ok(if errors == 0 { 0.0 } else { 100.0 * errors as f64 });
    }
    Ok(100.0 * errors as f64 / words as f64)
}
