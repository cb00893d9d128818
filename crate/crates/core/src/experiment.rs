//! End-to-end trend run on synthetic corpora: ASR pretraining on speech
//! plus textograms, then SLU adaptation under several regimes.

use std::time::Instant;

use crate::corpus::{generate_corpus, slu_symbols, IntentPlacement, SynthConfig, SynthTask};
use crate::evaluate::{decode_examples, references, score, Metric};
use crate::featpipe::{FeaturePipeline, FeaturePipelineConfig, NormStats};
use crate::network::{Model, ModelConfig};
use crate::rng::derive_seed;
use crate::symbols::default_symbol_set;
use crate::textogram::TextogramConfig;
use crate::trainer::{
    adapt, examples_from_utterances, prepare_adaptation, pretrain, EpochLog, FeatureContext, Regime, TargetSpec,
    TrainConfig, TrainError, TrainObserver,
};

#[derive(Clone, Debug)]
pub struct TrendConfig {
    pub asr: SynthConfig,
    pub slu: SynthConfig,
    pub model: ModelConfig,
    pub pipeline: FeaturePipelineConfig,
    pub textogram: TextogramConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub placement: IntentPlacement,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrendConfig {
    /// Desk-scale settings sized for a single CPU core.
    fn default() -> Self {
        let asr = SynthConfig {
            task: SynthTask::Asr,
            utterances: 1500,
            vocab_size: 150,
            test_fraction: 0.1,
            channel_sigma: 0.3,
            seed: 101,
            ..SynthConfig::default()
        };
        let slu = SynthConfig {
            task: SynthTask::Slu,
            n_intents: 16,
            utterances: 5000,
            test_fraction: 0.2,
            channel_sigma: 0.6,
            seed: 202,
            ..SynthConfig::default()
        };
        let model = ModelConfig {
            input_dim: 324,
            enc_layers: 1,
            enc_cells: 32,
            bidirectional_encoder: true,
            pred_cells: 32,
            joint_dim: 32,
            vocab_size: 42,
        };
        let pretrain = TrainConfig {
            epochs: 6,
            batch_size: 8,
            start_lr: 3e-4,
            max_lr: 3e-3,
            warmup_epochs: 1.0,
            ..TrainConfig::default()
        };
        let adapt = TrainConfig {
            epochs: 8,
            warmup_epochs: 0.5,
            ..pretrain.clone()
        };
        Self {
            asr,
            slu,
            model,
            pipeline: FeaturePipelineConfig::default(),
            textogram: TextogramConfig {
                duration_frames: 3,
                duration_jitter: 3,
                ..TextogramConfig::default()
            },
            pretrain,
            adapt,
            placement: IntentPlacement::Last,
            augment: false,
            seed: 7,
        }
    }
}

/// One adaptation run of the trend table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: &'static str,
    pub regime: Regime,
    pub speech_fraction: f64,
}

pub fn standard_runs() -> Vec<RunSpec> {
    vec![
        RunSpec {
            name: "text_only",
            regime: Regime::AdaptTextOnly,
            speech_fraction: 0.0,
        },
        RunSpec {
            name: "speech_only_0.1",
            regime: Regime::AdaptSpeechOnly,
            speech_fraction: 0.1,
        },
        RunSpec {
            name: "mixed_0.1",
            regime: Regime::AdaptMixed,
            speech_fraction: 0.1,
        },
        RunSpec {
            name: "speech_only_1.0",
            regime: Regime::AdaptSpeechOnly,
            speech_fraction: 1.0,
        },
        RunSpec {
            name: "mixed_1.0",
            regime: Regime::AdaptMixed,
            speech_fraction: 1.0,
        },
    ]
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub name: String,
    pub intent_accuracy: f64,
    pub wer: f64,
    pub seconds: f64,
    /// The adapted model.
    pub model: Model,
    /// `(id, tagged hypothesis)` on the held-out SLU speech.
    pub hyps: Vec<(String, String)>,
}

#[derive(Clone, Debug)]
pub struct TrendReport {
    pub pretrain_wer: f64,
    /// WER of the unadapted model on held-out SLU speech.
    pub base_slu_wer: f64,
    /// `(id, tagged reference)` for the held-out SLU speech.
    pub references: Vec<(String, String)>,
    pub pretrain_seconds: f64,
    pub runs: Vec<RunResult>,
    pub base: Model,
    pub total_seconds: f64,
}

impl TrendReport {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.runs.iter().find(|r| r.name == name).map(|r| r.intent_accuracy)
    }
}

struct Progress<'a>(&'a mut dyn FnMut(&str), &'static str);

impl TrainObserver for Progress<'_> {
    fn on_epoch(&mut self, log: &EpochLog, _model: &Model) -> Result<(), TrainError> {
        (self.0)(&format!(
            "{} epoch {} loss {:.3} speech {:?} text {:?}",
            self.1,
            log.epoch,
            log.loss,
            log.speech_loss.map(|v| (v * 1000.0).round() / 1000.0),
            log.text_loss.map(|v| (v * 1000.0).round() / 1000.0)
        ));
        Ok(())
    }
}

/// Pretrains once, then runs each of `runs` from the same base model and
/// scores it on held-out SLU speech.
pub fn run_trend(
    cfg: &TrendConfig,
    runs: &[RunSpec],
    progress: &mut dyn FnMut(&str),
) -> Result<TrendReport, TrainError> {
    let start = Instant::now();
    let base_set = default_symbol_set();
    let asr = generate_corpus(&cfg.asr)?;
    let slu = generate_corpus(&cfg.slu)?;
    let stats = NormStats::compute(asr.train.iter().map(|u| &u.frames))?;
    let pipeline = FeaturePipeline::new(
        FeaturePipelineConfig {
            norm_stats: Some(stats),
            ..cfg.pipeline.clone()
        },
        base_set.len(),
    );
    let ctx = FeatureContext {
        pipeline: pipeline.clone(),
        textogram_set: base_set.clone(),
        textogram: cfg.textogram.clone(),
        augment: cfg.augment,
    };

    let asr_spec = TargetSpec {
        output: base_set.clone(),
        textogram: base_set.clone(),
        tags: None,
    };
    let train = examples_from_utterances(&asr.train, &asr_spec, &pipeline, &cfg.textogram, true, true)?;
    let test = examples_from_utterances(&asr.test, &asr_spec, &pipeline, &cfg.textogram, true, false)?;
    let init = Model::new(cfg.model.clone(), derive_seed(cfg.seed, &[1]))?;
    let pcfg = TrainConfig {
        seed: derive_seed(cfg.seed, &[2]),
        ..cfg.pretrain.clone()
    };
    let base = pretrain(init, &train, &pcfg, &ctx, &mut Progress(progress, "pretrain"))?;
    let hyps = decode_examples(&base, &test, &ctx, &base_set)?;
    let pretrain_wer = score(&hyps, &references(&test, &base_set), &[Metric::Wer], "")?[0].value;
    let pretrain_seconds = start.elapsed().as_secs_f64();
    progress(&format!("pretrain wer {pretrain_wer:.2} ({pretrain_seconds:.0}s)"));

    let symbols = slu_symbols(slu.train.iter().map(|u| &u.labels));
    let (_, slu_set) = prepare_adaptation(&base, &base_set, &symbols, 0)?;
    let slu_spec = TargetSpec {
        output: slu_set.clone(),
        textogram: base_set.clone(),
        tags: Some(cfg.placement),
    };
    let slu_train = examples_from_utterances(&slu.train, &slu_spec, &pipeline, &cfg.textogram, true, true)?;
    let slu_test = examples_from_utterances(&slu.test, &slu_spec, &pipeline, &cfg.textogram, true, false)?;
    let refs = references(&slu_test, &slu_set);
    let base_hyps = decode_examples(&base, &slu_test, &ctx, &base_set)?;
    let base_slu_wer = score(&base_hyps, &refs, &[Metric::Wer], "")?[0].value;
    progress(&format!("base model wer on SLU speech {base_slu_wer:.2}"));

    let mut results = Vec::new();
    for run in runs {
        let t0 = Instant::now();
        let acfg = TrainConfig {
            regime: run.regime,
            speech_fraction: run.speech_fraction,
            seed: derive_seed(cfg.seed, &[3]),
            ..cfg.adapt.clone()
        };
        let model = adapt(
            &base,
            &base_set,
            &symbols,
            &slu_train,
            &acfg,
            &ctx,
            &mut Progress(progress, run.name),
        )?;
        let hyps = decode_examples(&model, &slu_test, &ctx, &slu_set)?;
        let scored = score(&hyps, &refs, &[Metric::IntentAccuracy, Metric::Wer], "")?;
        let r = RunResult {
            name: run.name.to_string(),
            intent_accuracy: scored[0].value,
            wer: scored[1].value,
            seconds: t0.elapsed().as_secs_f64(),
            model,
            hyps,
        };
        progress(&format!(
            "{}: intent {:.2} wer {:.2} ({:.0}s)",
            r.name, r.intent_accuracy, r.wer, r.seconds
        ));
        results.push(r);
    }
    Ok(TrendReport {
        pretrain_wer,
        base_slu_wer,
        references: refs,
        pretrain_seconds,
        runs: results,
        base,
        total_seconds: start.elapsed().as_secs_f64(),
    })
}
