//! Training examples, length-bucketed batching and feature materialization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::TrainError;
use crate::corpus::synth::Utterance;
use crate::corpus::tags::{serialize_slu_targets, IntentPlacement};
use crate::corpus::{CorpusError, ManifestEntry, SluLabels};
use crate::featpipe::{read_features, FeaturePipeline, FeatureSequence, Modality, SpeechAugment};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded};
use crate::symbols::{tokenize, LabelSequence, SymbolSet, UnknownPolicy};
use crate::textogram::{apply_confusions, apply_mask, build_textogram, TextogramConfig};

/// Additive jitter, in frames, applied to lengths before sorting.
pub const BUCKET_JITTER: f64 = 4.0;

/// How transcripts become output targets.
#[derive(Clone, Debug)]
pub struct TargetSpec {
    /// Output vocabulary (graphemes plus any SLU labels).
    pub output: SymbolSet,
    /// Inventory the textogram is built over; transcripts only.
    pub textogram: SymbolSet,
    /// `None` trains on plain transcripts; `Some` adds SLU tags.
    pub tags: Option<IntentPlacement>,
}

impl TargetSpec {
    pub fn transcript_ids(&self, transcript: &str) -> Result<LabelSequence, TrainError> {
        Ok(tokenize(transcript, &self.textogram, UnknownPolicy::Strict)?)
    }

    pub fn target_text(&self, transcript: &str, labels: &SluLabels) -> Result<String, CorpusError> {
        match self.tags {
            Some(p) => serialize_slu_targets(transcript, labels, p),
            None => Ok(transcript.to_string()),
        }
    }

    pub fn target_ids(&self, transcript: &str, labels: &SluLabels) -> Result<LabelSequence, TrainError> {
        let text = self.target_text(transcript, labels)?;
        Ok(tokenize(&text, &self.output, UnknownPolicy::Strict)?)
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub modality: Modality,
    /// Base speech frames; `None` for text examples.
    pub base: Option<Arc<Matrix>>,
    /// Transcript graphemes, the textogram input.
    pub transcript: LabelSequence,
    pub target: LabelSequence,
    /// Encoder frame count, used for length bucketing.
    pub n_frames: usize,
    /// Stratum for speech subsampling: the intent, or empty.
    pub stratum: String,
}

impl Example {
    pub fn speech(
        id: &str,
        base: Arc<Matrix>,
        transcript: &str,
        labels: &SluLabels,
        spec: &TargetSpec,
        pipeline: &FeaturePipeline,
    ) -> Result<Self, TrainError> {
        Ok(Self {
            id: id.to_string(),
            modality: Modality::Speech,
            n_frames: pipeline.speech_frames(base.rows()),
            base: Some(base),
            transcript: spec.transcript_ids(transcript)?,
            target: spec.target_ids(transcript, labels)?,
            stratum: labels.intent.clone().unwrap_or_default(),
        })
    }

    pub fn text(
        id: &str,
        transcript: &str,
        labels: &SluLabels,
        spec: &TargetSpec,
        pipeline: &FeaturePipeline,
        textogram: &TextogramConfig,
    ) -> Result<Self, TrainError> {
        let ids = spec.transcript_ids(transcript)?;
        Ok(Self {
            id: id.to_string(),
            modality: Modality::Text,
            base: None,
            n_frames: pipeline.text_frames(ids.len() * textogram.duration_frames),
            transcript: ids,
            target: spec.target_ids(transcript, labels)?,
            stratum: labels.intent.clone().unwrap_or_default(),
        })
    }
}

/// Examples for in-memory utterances: one speech example each when
/// `speech`, plus a text mirror each when `text`.
pub fn examples_from_utterances(
    utts: &[Utterance],
    spec: &TargetSpec,
    pipeline: &FeaturePipeline,
    textogram: &TextogramConfig,
    speech: bool,
    text: bool,
) -> Result<Vec<Example>, TrainError> {
    let mut out = Vec::new();
    for u in utts {
        if speech {
            out.push(Example::speech(
                &u.id,
                Arc::new(u.frames.clone()),
                &u.transcript,
                &u.labels,
                spec,
                pipeline,
            )?);
        }
        if text {
            out.push(Example::text(
                &crate::corpus::synth::text_id(&u.id),
                &u.transcript,
                &u.labels,
                spec,
                pipeline,
                textogram,
            )?);
        }
    }
    Ok(out)
}

/// Examples for manifest entries; feature paths resolve against `base_dir`.
pub fn examples_from_manifest(
    entries: &[ManifestEntry],
    base_dir: &Path,
    spec: &TargetSpec,
    pipeline: &FeaturePipeline,
    textogram: &TextogramConfig,
) -> Result<Vec<Example>, TrainError> {
    entries
        .iter()
        .map(|e| match e.modality {
            Modality::Speech => {
                let path = e
                    .feature_path(base_dir)
                    .ok_or_else(|| TrainError::Data(format!("speech entry {:?} has no features", e.id)))?;
                let base = read_features(&path)?;
                Example::speech(&e.id, Arc::new(base), &e.transcript, &e.labels, spec, pipeline)
            }
            Modality::Text => Example::text(&e.id, &e.transcript, &e.labels, spec, pipeline, textogram),
        })
        .collect()
}

/// Keeps every text example and `⌊fraction · n_speech⌋` speech examples
/// (at least one when the fraction is positive), sampled per stratum with
/// largest-remainder quotas. Order is preserved.
pub fn subsample_speech(examples: Vec<Example>, fraction: f64, seed: u64) -> Vec<Example> {
    if fraction >= 1.0 {
        return examples;
    }
    let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        if e.modality == Modality::Speech {
            strata.entry(e.stratum.as_str()).or_default().push(i);
        }
    }
    let n_speech: usize = strata.values().map(Vec::len).sum();
    let mut want = (fraction * n_speech as f64).floor() as usize;
    if fraction > 0.0 && want == 0 && n_speech > 0 {
        want = 1;
    }
    let mut quotas: Vec<(usize, f64, &str)> = strata
        .iter()
        .map(|(k, v)| {
            let exact = fraction * v.len() as f64;
            (exact.floor() as usize, exact - exact.floor(), *k)
        })
        .collect();
    let mut left = want.saturating_sub(quotas.iter().map(|q| q.0).sum());
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    by_remainder.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &q in by_remainder.iter().cycle().take(quotas.len() * 2) {
        if left == 0 {
            break;
        }
        if quotas[q].0 < strata[quotas[q].2].len() {
            quotas[q].0 += 1;
            left -= 1;
        }
    }
    let mut keep = BTreeSet::new();
    for (s, (quota, _, key)) in quotas.iter().enumerate() {
        let mut members = strata[key].clone();
        members.shuffle(&mut seeded(derive_seed(seed, &[s as u64])));
        keep.extend(members.into_iter().take(*quota));
    }
    examples
        .into_iter()
        .enumerate()
        .filter(|(i, e)| e.modality == Modality::Text || keep.contains(i))
        .map(|(_, e)| e)
        .collect()
}

/// Sorts by length plus seeded jitter, chunks into batches, and shuffles
/// batch order. Returns indices into `lengths`.
pub fn make_batches(lengths: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    if lengths.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    let mut rng = seeded(seed);
    let mut keyed: Vec<(f64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| (l as f64 + rng.gen_range(0.0..BUCKET_JITTER), i))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut batches: Vec<Vec<usize>> = keyed
        .chunks(batch_size)
        .map(|c| c.iter().map(|&(_, i)| i).collect())
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// One utterance ready for the network. `features` may carry padding
/// frames past `n_frames`; they are cut before the forward pass.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub id: String,
    pub features: FeatureSequence,
    pub n_frames: usize,
    pub target: LabelSequence,
}

impl BatchItem {
    pub fn modality(&self) -> Modality {
        self.features.modality()
    }

    pub fn true_features(&self) -> FeatureSequence {
        if self.features.len() == self.n_frames {
            self.features.clone()
        } else {
            self.features.truncated(self.n_frames)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    /// Pads every item to the longest sequence in the batch.
    pub fn padded(mut self) -> Batch {
        let max = self.items.iter().map(|i| i.features.len()).max().unwrap_or(0);
        for it in &mut self.items {
            let extra = max - it.features.len();
            if extra > 0 {
                it.features = it.features.padded(extra);
            }
        }
        self
    }
}

/// Feature construction settings shared by every step of a run.
#[derive(Clone, Debug)]
pub struct FeatureContext {
    pub pipeline: FeaturePipeline,
    pub textogram_set: SymbolSet,
    pub textogram: TextogramConfig,
    /// Speech augmentation (noise injection and block masks).
    pub augment: bool,
}

impl FeatureContext {
    /// Features for one example. `seed` drives every random choice:
    /// augmentation donor, masks, textogram masking and confusions.
    pub fn features(&self, ex: &Example, pool: &[Example], seed: u64) -> Result<FeatureSequence, TrainError> {
        match ex.modality {
            Modality::Speech => {
                let base = ex.base.as_ref().expect("speech example carries frames");
                if !self.augment {
                    return Ok(self.pipeline.speech(base, None)?);
                }
                let mut rng = seeded(derive_seed(seed, &[0xD0]));
                let donors: Vec<&Example> = pool
                    .iter()
                    .filter(|p| p.modality == Modality::Speech && p.id != ex.id)
                    .collect();
                let donor = if donors.is_empty() {
                    None
                } else {
                    let d = donors[rng.gen_range(0..donors.len())];
                    Some(self.pipeline.normalized(d.base.as_ref().expect("speech frames"))?)
                };
                Ok(self.pipeline.speech(
                    base,
                    Some(SpeechAugment {
                        donor: donor.as_ref(),
                        seed,
                    }),
                )?)
            }
            Modality::Text => {
                let cfg = TextogramConfig {
                    seed,
                    ..self.textogram.clone()
                };
                let t = build_textogram(&ex.transcript, &cfg, &self.textogram_set)?;
                let t = apply_confusions(&t, &cfg, &self.textogram_set)?;
                let t = apply_mask(&t, cfg.mask_prob, derive_seed(seed, &[0x3A5C]))?;
                Ok(self.pipeline.text(&t)?)
            }
        }
    }

    /// Deterministic evaluation features: no augmentation, no masking.
    pub fn eval_features(&self, ex: &Example) -> Result<FeatureSequence, TrainError> {
        match ex.modality {
            Modality::Speech => Ok(self.pipeline.speech(ex.base.as_ref().expect("speech frames"), None)?),
            Modality::Text => {
                let cfg = TextogramConfig {
                    mask_prob: 0.0,
                    confusion_pairs: Vec::new(),
                    ..self.textogram.clone()
                };
                let t = build_textogram(&ex.transcript, &cfg, &self.textogram_set)?;
                Ok(self.pipeline.text(&t)?)
            }
        }
    }

    pub fn batch(&self, examples: &[Example], indices: &[usize], seeds: &[u64]) -> Result<Batch, TrainError> {
        let items = indices
            .iter()
            .zip(seeds)
            .map(|(&i, &s)| {
                let ex = &examples[i];
                let features = self.features(ex, examples, s)?;
                Ok(BatchItem {
                    id: ex.id.clone(),
                    n_frames: features.len(),
                    features,
                    target: ex.target.clone(),
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(Batch { items })
    }
}
