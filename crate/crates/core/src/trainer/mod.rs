//! Optimization: schedule, AdamW, batching and the pretrain/adapt loops.

pub mod data;
pub mod optim;
pub mod schedule;

use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::featpipe::{FeatureError, Modality};
use crate::network::{FreezeMask, Grads, Model, NetworkError, ParamGroup, UtteranceGrad};
use crate::rng::derive_seed;
use crate::symbols::{SymbolError, SymbolSet};
use crate::textogram::TextogramError;
use crate::transducer::TransducerError;

pub use data::{
    examples_from_manifest, examples_from_utterances, make_batches, subsample_speech, Batch, BatchItem, Example,
    FeatureContext, TargetSpec,
};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::lr_at;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("non-finite {what} at step {step} (utterance {id:?}, loss {loss})")]
    NonFinite {
        what: &'static str,
        step: usize,
        id: String,
        loss: f64,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Symbols(#[from] SymbolError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Textogram(#[from] TextogramError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Numerical failures, as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Network(NetworkError::Transducer(TransducerError::NonFinite { .. }))
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Nothing frozen; speech and text both train the whole network.
    #[default]
    Pretrain,
    /// Text examples only, encoder frozen for the whole run.
    AdaptTextOnly,
    /// Speech samples update everything, text samples skip the encoder.
    AdaptMixed,
    /// Speech examples only, nothing frozen.
    AdaptSpeechOnly,
}

impl Regime {
    pub fn admits(self, m: Modality) -> bool {
        match self {
            Regime::Pretrain | Regime::AdaptMixed => true,
            Regime::AdaptTextOnly => m == Modality::Text,
            Regime::AdaptSpeechOnly => m == Modality::Speech,
        }
    }

    /// Whether a sample of modality `m` may update the encoder.
    pub fn updates_encoder(self, m: Modality) -> bool {
        match self {
            Regime::Pretrain | Regime::AdaptSpeechOnly => true,
            Regime::AdaptTextOnly => false,
            Regime::AdaptMixed => m == Modality::Speech,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Pretrain => "pretrain",
            Regime::AdaptTextOnly => "adapt_text_only",
            Regime::AdaptMixed => "adapt_mixed",
            Regime::AdaptSpeechOnly => "adapt_speech_only",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "pretrain" => Ok(Regime::Pretrain),
            "adapt_text_only" | "text_only" => Ok(Regime::AdaptTextOnly),
            "adapt_mixed" | "mixed" => Ok(Regime::AdaptMixed),
            "adapt_speech_only" | "speech_only" => Ok(Regime::AdaptSpeechOnly),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub start_lr: f64,
    pub max_lr: f64,
    pub warmup_epochs: f64,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub regime: Regime,
    /// Share of speech examples kept in adaptation regimes.
    pub speech_fraction: f64,
    /// Threads for per-utterance forward/backward. Reduction order is fixed,
    /// so results do not depend on this value.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            start_lr: 2e-5,
            max_lr: 2e-4,
            warmup_epochs: 6.0,
            adamw: AdamWConfig::default(),
            clip_norm: 5.0,
            regime: Regime::Pretrain,
            speech_fraction: 1.0,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.start_lr >= 0.0 && self.max_lr >= 0.0 && self.warmup_epochs >= 0.0) {
            return bad("learning rates and warmup must be non-negative");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.speech_fraction) {
            return bad("speech_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub modality_mix: ModalityMix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ModalityMix {
    pub speech: usize,
    pub text: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    /// Mean utterance loss over the batch.
    pub loss: f64,
    pub mix: ModalityMix,
    pub speech_loss: f64,
    pub text_loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-epoch summary with mean loss per modality.
#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub speech_loss: Option<f64>,
    pub text_loss: Option<f64>,
}

/// Freeze mask for one sample.
fn sample_mask(base: &FreezeMask, regime: Regime, m: Modality) -> FreezeMask {
    if regime.updates_encoder(m) {
        base.clone()
    } else {
        base.clone().with_group(ParamGroup::Encoder, true)
    }
}

fn backward_all(
    model: &Model,
    batch: &Batch,
    regime: Regime,
    workers: usize,
) -> Result<Vec<UtteranceGrad>, TrainError> {
    let base = model.params.freeze_mask();
    let one = |it: &BatchItem| -> Result<UtteranceGrad, TrainError> {
        let mask = sample_mask(base, regime, it.modality());
        Ok(model.backward(&it.true_features(), &it.target, &mask)?)
    };
    if workers <= 1 || batch.items.len() < 2 {
        return batch.items.iter().map(one).collect();
    }
    let chunk = batch.items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(batch.items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// One optimizer step. Encoder gradients from samples that may not touch
/// the encoder are never computed, and a tensor that received no
/// contribution in this batch is not stepped at all, so it stays
/// bit-identical.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<StepOutcome, TrainError> {
    if batch.items.is_empty() {
        return Err(TrainError::Data("empty batch".into()));
    }
    for it in &batch.items {
        it.features.check()?;
    }
    let regime = cfg.regime;
    let per_utt = backward_all(model, batch, regime, cfg.workers)?;
    let mut total = Grads::zeros_like(&model.params);
    let mut out = StepOutcome::default();
    let mut encoder_touched = false;
    for (it, g) in batch.items.iter().zip(&per_utt) {
        if !g.loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss",
                step,
                id: it.id.clone(),
                loss: g.loss,
            });
        }
        total.add_assign(&g.grads);
        out.loss += g.loss;
        match it.modality() {
            Modality::Speech => {
                out.mix.speech += 1;
                out.speech_loss += g.loss;
            }
            Modality::Text => {
                out.mix.text += 1;
                out.text_loss += g.loss;
            }
        }
        encoder_touched |= regime.updates_encoder(it.modality());
    }
    let n = batch.items.len() as f64;
    out.loss /= n;
    total.scale(1.0 / n);

    let mask = model.params.freeze_mask();
    let active: BTreeSet<String> = model
        .params
        .names()
        .filter(|name| !mask.is_frozen(name))
        .filter(|name| encoder_touched || ParamGroup::of(name) != ParamGroup::Encoder)
        .map(String::from)
        .collect();
    for (name, g) in total.iter_mut() {
        if !active.contains(name) {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            what: "gradient",
            step,
            id: batch.items[0].id.clone(),
            loss: out.loss,
        });
    }
    out.grad_norm = total.global_norm();
    if out.grad_norm > cfg.clip_norm {
        total.scale(cfg.clip_norm / out.grad_norm);
    }
    opt.step(&mut model.params, &total, &active, lr);
    Ok(out)
}

/// Receives progress from [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_epoch(&mut self, _log: &EpochLog, _model: &Model) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;
impl TrainObserver for Quiet {}

/// Writes step logs as JSON Lines.
pub struct JsonlLog<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonlLog<W> {
    fn on_step(&mut self, log: &StepLog) -> Result<(), TrainError> {
        let line = serde_json::to_string(log).map_err(|e| TrainError::Data(e.to_string()))?;
        writeln!(self.0, "{line}")?;
        Ok(())
    }
}

/// Runs `cfg.epochs` epochs over the examples the regime admits.
pub fn train(
    mut model: Model,
    examples: &[Example],
    cfg: &TrainConfig,
    ctx: &FeatureContext,
    observer: &mut dyn TrainObserver,
) -> Result<Model, TrainError> {
    cfg.validate()?;
    let selected: Vec<Example> = examples
        .iter()
        .filter(|e| cfg.regime.admits(e.modality))
        .cloned()
        .collect();
    let selected = if cfg.regime == Regime::Pretrain {
        selected
    } else {
        subsample_speech(selected, cfg.speech_fraction, derive_seed(cfg.seed, &[0x5F]))
    };
    if selected.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    for e in &selected {
        if let Some(&bad) = e.target.ids().iter().find(|&&id| id == 0 || id >= model.vocab_size()) {
            return Err(TrainError::Data(format!(
                "target id {bad} of {:?} outside model vocabulary",
                e.id
            )));
        }
    }
    if cfg.epochs == 0 {
        return Ok(model);
    }
    let lengths: Vec<usize> = selected.iter().map(|e| e.n_frames).collect();
    let steps_per_epoch = lengths.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = make_batches(&lengths, cfg.batch_size, derive_seed(cfg.seed, &[0xBA, epoch as u64]))?;
        let (mut sum, mut s_sum, mut t_sum, mut s_n, mut t_n) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for indices in &batches {
            let seeds: Vec<u64> = indices
                .iter()
                .map(|&i| derive_seed(cfg.seed, &[0xFE, epoch as u64, i as u64]))
                .collect();
            let batch = ctx.batch(&selected, indices, &seeds)?;
            let lr = lr_at(step, cfg, steps_per_epoch);
            let out = train_step(&mut model, &mut opt, &batch, cfg, lr, step)?;
            observer.on_step(&StepLog {
                step,
                epoch,
                lr,
                loss: out.loss,
                modality_mix: out.mix,
            })?;
            sum += out.loss;
            s_sum += out.speech_loss;
            t_sum += out.text_loss;
            s_n += out.mix.speech;
            t_n += out.mix.text;
            step += 1;
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        observer.on_epoch(
            &EpochLog {
                epoch,
                steps: batches.len(),
                loss: sum / batches.len() as f64,
                speech_loss: mean(s_sum, s_n),
                text_loss: mean(t_sum, t_n),
            },
            &model,
        )?;
    }
    Ok(model)
}

/// Pretraining: trains a model from scratch (or from `init`) on speech
/// entries and their text mirrors with nothing frozen.
pub fn pretrain(
    init: Model,
    examples: &[Example],
    cfg: &TrainConfig,
    ctx: &FeatureContext,
    observer: &mut dyn TrainObserver,
) -> Result<Model, TrainError> {
    let cfg = TrainConfig {
        regime: Regime::Pretrain,
        ..cfg.clone()
    };
    train(init, examples, &cfg, ctx, observer)
}

/// Output vocabulary and initial model for an adaptation run. New symbol
/// rows are appended; collisions with the base set are errors.
pub fn prepare_adaptation(
    base: &Model,
    base_set: &SymbolSet,
    slu_symbols: &[String],
    seed: u64,
) -> Result<(Model, SymbolSet), TrainError> {
    if base.vocab_size() != base_set.len() {
        return Err(TrainError::Data(format!(
            "model vocabulary {} does not match symbol set {}",
            base.vocab_size(),
            base_set.len()
        )));
    }
    let set = base_set.extend(slu_symbols)?;
    let mut model = base.extend_vocabulary(slu_symbols.len(), derive_seed(seed, &[0xE7]))?;
    let mask = model
        .params
        .freeze_mask()
        .clone()
        .with_group(ParamGroup::Encoder, false);
    *model.params.freeze_mask_mut() = mask;
    Ok((model, set))
}

/// Adaptation: extends the vocabulary, then trains in `cfg.regime`.
/// `examples` must be built against the extended set (see
/// [`prepare_adaptation`]); text examples encode transcripts only.
pub fn adapt(
    base: &Model,
    base_set: &SymbolSet,
    slu_symbols: &[String],
    examples: &[Example],
    cfg: &TrainConfig,
    ctx: &FeatureContext,
    observer: &mut dyn TrainObserver,
) -> Result<Model, TrainError> {
    if cfg.regime == Regime::Pretrain {
        return Err(TrainError::Config("adaptation needs an adapt_* regime".into()));
    }
    let (mut model, _) = prepare_adaptation(base, base_set, slu_symbols, cfg.seed)?;
    if cfg.regime == Regime::AdaptTextOnly {
        model.params.freeze_mask_mut().set_group(ParamGroup::Encoder, true);
    }
    train(model, examples, cfg, ctx, observer)
}
