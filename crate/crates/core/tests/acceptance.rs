//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use textslu::corpus::{generate_corpus, slu_symbols, SynthConfig, SynthTask};
use textslu::evaluate::{decode_examples, references, score, Metric};
use textslu::experiment::{run_trend, standard_runs, TrendConfig};
use textslu::featpipe::{FeaturePipeline, FeaturePipelineConfig, Modality, NormStats};
use textslu::gradcheck::{logit_check, param_check, random_lattice, tiny_inputs, tiny_model, GRAD_TOLERANCE};
use textslu::linalg::Matrix;
use textslu::network::{checkpoint, Model, ModelConfig, ParamGroup};
use textslu::rng::{derive_seed, seeded};
use textslu::symbols::{default_symbol_set, tokenize, LabelSequence, UnknownPolicy};
use textslu::textogram::{apply_mask, build_textogram, TextogramConfig};
use textslu::trainer::{
    examples_from_utterances, lr_at, make_batches, prepare_adaptation, pretrain, train_step, AdamW, Example,
    FeatureContext, Quiet, Regime, TargetSpec, TrainConfig,
};
use textslu::transducer::{brute_force_loss, rnnt_loss};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn loss_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for t in 1..=4 {
        for u in 0..=3 {
            for k in 2..=5 {
                for seed in 0..50 {
                    let l = random_lattice(t, u, k, seed).map_err(err)?;
                    let fb = rnnt_loss(&l).map_err(err)?.loss;
                    let (bf, _) = brute_force_loss(&l).map_err(err)?;
                    worst = worst.max((fb - bf).abs());
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 10.0,
        format!("{cases} lattices, max |fb - brute| = {worst:.2e}, {secs:.2}s"),
    )
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut logit = 0.0f64;
    for seed in 0..50 {
        logit = logit.max(logit_check(&random_lattice(3, 2, 3, seed).map_err(err)?, false).map_err(err)?);
    }
    let y = LabelSequence::from_ids_unchecked(vec![1, 2]);
    let mut param = 0.0f64;
    for seed in 0..2 {
        let m = tiny_model(seed).map_err(err)?;
        for f in tiny_inputs(seed) {
            param = param.max(param_check(&m, &f, &y, false).map_err(err)?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        logit <= GRAD_TOLERANCE && param <= GRAD_TOLERANCE && secs < 60.0,
        format!("logit rel err {logit:.2e}, parameter rel err {param:.2e}, {secs:.2}s"),
    )
}

fn textogram_exactness() -> Outcome {
    let set = default_symbol_set();
    let cfg = TextogramConfig {
        mask_prob: 0.0,
        ..TextogramConfig::default()
    };
    let ids = tokenize("ideas", &set, UnknownPolicy::Strict).map_err(err)?;
    let t = build_textogram(&ids, &cfg, &set).map_err(err)?;
    let m = t.to_matrix();
    let mut expected = Matrix::zeros(20, set.len());
    for (i, &id) in ids.ids().iter().enumerate() {
        for r in 4 * i..4 * i + 4 {
            expected.set(r, id, 1.0);
        }
    }
    let blocks: Vec<(usize, usize)> = (0..5).map(|i| (4 * i, 4)).collect();
    let layout_ok = m == expected && t.blocks() == blocks.as_slice();

    let long = tokenize(&"ab".repeat(125), &set, UnknownPolicy::Strict).map_err(err)?;
    let full = build_textogram(&long, &cfg, &set).map_err(err)?;
    let masked = apply_mask(&full, 0.25, 17).map_err(err)?;
    let kept = masked.n_active() as f64;
    let sigma = (1000.0f64 * 0.25 * 0.75).sqrt();
    check(
        layout_ok && full.n_active() == 1000 && (kept - 750.0).abs() <= 3.0 * sigma,
        format!(
            "layout {} ({} frames), mask kept {kept} of {} (750 ± {:.1})",
            if layout_ok { "exact" } else { "MISMATCH" },
            m.rows(),
            full.n_active(),
            3.0 * sigma
        ),
    )
}

fn small_corpus(task: SynthTask, n: usize, seed: u64) -> Result<textslu::corpus::SynthCorpus, String> {
    generate_corpus(&SynthConfig {
        task,
        utterances: n,
        test_fraction: 0.25,
        seed,
        ..SynthConfig::default()
    })
    .map_err(err)
}

fn context(norm: NormStats, augment: bool) -> FeatureContext {
    let set = default_symbol_set();
    FeatureContext {
        pipeline: FeaturePipeline::new(
            FeaturePipelineConfig {
                norm_stats: Some(norm),
                ..FeaturePipelineConfig::default()
            },
            set.len(),
        ),
        textogram_set: set,
        textogram: TextogramConfig::default(),
        augment,
    }
}

fn dimension_contract() -> Outcome {
    let corpus = small_corpus(SynthTask::Asr, 24, 5)?;
    let norm = NormStats::compute(corpus.train.iter().map(|u| &u.frames)).map_err(err)?;
    let ctx = context(norm, true);
    let set = default_symbol_set();
    let dims = ctx.pipeline.dims;
    let spec = TargetSpec {
        output: set.clone(),
        textogram: set,
        tags: None,
    };
    let exs = examples_from_utterances(&corpus.train, &spec, &ctx.pipeline, &ctx.textogram, true, true).map_err(err)?;
    let lengths: Vec<usize> = exs.iter().map(|e| e.n_frames).collect();
    let mut checked = 0;
    let mut rate_ok = true;
    for (b, idx) in make_batches(&lengths, 4, 3).map_err(err)?.iter().enumerate() {
        let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(9, &[b as u64, i as u64])).collect();
        let batch = ctx.batch(&exs, idx, &seeds).map_err(err)?.padded();
        for (it, &i) in batch.items.iter().zip(idx) {
            it.features.check().map_err(err)?;
            let f = it.features.frames();
            let (lo, hi) = match it.features.modality() {
                Modality::Speech => (dims.speech, dims.total()),
                Modality::Text => (0, dims.speech),
            };
            if f.cols() != 324 || f.iter_rows().any(|r| r[lo..hi].iter().any(|&v| v != 0.0)) {
                return Err(format!("zero-fill violated for {}", it.id));
            }
            if let Some(base) = &exs[i].base {
                rate_ok &= it.n_frames == base.rows().div_ceil(2);
            }
            checked += 1;
        }
    }
    check(
        dims.speech == 240 && dims.total() == 324 && rate_ok,
        format!(
            "speech {} dims, composed {} dims, half frame rate {}, zero-fill on {checked} batch items",
            dims.speech,
            dims.total(),
            if rate_ok { "ok" } else { "VIOLATED" }
        ),
    )
}

fn encoder(m: &Model) -> Vec<(String, Vec<f64>)> {
    m.params
        .iter()
        .filter(|(n, _)| ParamGroup::of(n) == ParamGroup::Encoder)
        .map(|(n, t)| (n.to_string(), t.data.clone()))
        .collect()
}

fn mixed_all_text_batch_keeps_encoder() -> Result<bool, String> {
    let corpus = small_corpus(SynthTask::Slu, 12, 8)?;
    let norm = NormStats::compute(corpus.train.iter().map(|u| &u.frames)).map_err(err)?;
    let ctx = context(norm, true);
    let base_set = default_symbol_set();
    let base = Model::new(
        ModelConfig {
            input_dim: 324,
            enc_layers: 1,
            enc_cells: 8,
            bidirectional_encoder: true,
            pred_cells: 8,
            joint_dim: 8,
            vocab_size: base_set.len(),
        },
        4,
    )
    .map_err(err)?;
    let symbols = slu_symbols(corpus.train.iter().map(|u| &u.labels));
    let (mut model, set) = prepare_adaptation(&base, &base_set, &symbols, 0).map_err(err)?;
    let spec = TargetSpec {
        output: set,
        textogram: base_set,
        tags: Some(Default::default()),
    };
    let exs =
        examples_from_utterances(&corpus.train, &spec, &ctx.pipeline, &ctx.textogram, false, true).map_err(err)?;
    let idx: Vec<usize> = (0..exs.len().min(4)).collect();
    let batch = ctx.batch(&exs, &idx, &[1, 2, 3, 4]).map_err(err)?.padded();
    let cfg = TrainConfig {
        regime: Regime::AdaptMixed,
        ..TrainConfig::default()
    };
    let before = encoder(&model);
    let mut opt = AdamW::new(cfg.adamw.clone());
    train_step(&mut model, &mut opt, &batch, &cfg, 1e-2, 0).map_err(err)?;
    Ok(batch.items.iter().all(|i| i.features.modality() == Modality::Text) && encoder(&model) == before)
}

fn freezing_contract(trend: &Result<textslu::experiment::TrendReport, String>) -> Outcome {
    let text_only = match trend {
        Ok(r) => {
            let run = r
                .runs
                .iter()
                .find(|x| x.name == "text_only")
                .ok_or("no text_only run")?;
            encoder(&run.model) == encoder(&r.base)
        }
        Err(e) => return Err(format!("trend run failed: {e}")),
    };
    let mixed = mixed_all_text_batch_keeps_encoder()?;
    check(
        text_only && mixed,
        format!(
            "text-only run encoder {}, mixed all-text batch encoder {}",
            if text_only { "unchanged" } else { "CHANGED" },
            if mixed { "unchanged" } else { "CHANGED" }
        ),
    )
}

fn vocabulary_extension() -> Outcome {
    let cfg = ModelConfig {
        input_dim: 324,
        enc_layers: 1,
        enc_cells: 8,
        bidirectional_encoder: true,
        pred_cells: 8,
        joint_dim: 8,
        vocab_size: 42,
    };
    let base = Model::new(cfg, 21).map_err(err)?;
    let ext = base.extend_vocabulary(16, 5).map_err(err)?;
    let mut tensors_ok = ext.vocab_size() == 58;
    for (name, t) in base.params.iter() {
        let e = ext.params.get(name).ok_or(format!("{name} missing"))?;
        tensors_ok &= e.data[..t.data.len()] == t.data[..];
        tensors_ok &= e.shape[1..] == t.shape[1..];
    }
    let mut rng = seeded(3);
    let mut logits_ok = true;
    for _ in 0..20 {
        use rand::Rng;
        let he: Vec<f64> = (0..cfg_enc_out(&base)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hp: Vec<f64> = (0..base.config.pred_cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = base.joint_forward(&he, &hp).map_err(err)?;
        let b = ext.joint_forward(&he, &hp).map_err(err)?;
        logits_ok &= b.len() == 58 && b[..42] == a[..];
    }
    let y = LabelSequence::from_ids_unchecked(vec![1, 5, 27, 3]);
    let pred_ok = base.prediction_forward(&y).map_err(err)? == ext.prediction_forward(&y).map_err(err)?;
    let identity = base.extend_vocabulary(0, 5).map_err(err)? == base;
    check(
        tensors_ok && logits_ok && pred_ok && identity,
        format!(
            "42→58 tensors {}, old logits {}, prediction {}, n_new=0 identity {}",
            ok(tensors_ok),
            ok(logits_ok),
            ok(pred_ok),
            ok(identity)
        ),
    )
}

fn cfg_enc_out(m: &Model) -> usize {
    m.config.enc_out_dim()
}

fn ok(b: bool) -> &'static str {
    if b {
        "exact"
    } else {
        "MISMATCH"
    }
}

fn schedule_contract() -> Outcome {
    let cfg = TrainConfig::default();
    let spe = 250;
    let total = cfg.epochs * spe;
    let slope = cfg.max_lr / (total - 6 * spe) as f64;
    let first = lr_at(0, &cfg, spe);
    let knee = lr_at(6 * spe, &cfg, spe);
    let last = lr_at(total - 1, &cfg, spe);
    check(
        first == 2e-5 && (knee - 2e-4).abs() < 1e-18 && last <= slope * (1.0 + 1e-9) && lr_at(total, &cfg, spe) == 0.0,
        format!("lr(0)={first:e}, lr(6 epochs)={knee:e}, lr(last)={last:e} (slope {slope:e})"),
    )
}

fn trend_reproduction(trend: &Result<textslu::experiment::TrendReport, String>) -> Outcome {
    let r = trend.as_ref().map_err(|e| format!("trend run failed: {e}"))?;
    let acc = |n: &str| r.accuracy(n).unwrap_or(f64::NAN);
    let (text, s01, m01, s10, m10) = (
        acc("text_only"),
        acc("speech_only_0.1"),
        acc("mixed_0.1"),
        acc("speech_only_1.0"),
        acc("mixed_1.0"),
    );
    let a = text >= 0.7 * s10;
    let b = m01 > text && m01 > s01;
    let c = m10 >= s10 - 1.0;
    let fast = r.total_seconds < 1800.0;
    check(
        a && b && c && fast,
        format!(
            "(a) {} text_only {text:.1} vs 0.7 x speech_only_1.0 {s10:.1}; \
             (b) {} mixed_0.1 {m01:.1} vs text_only {text:.1}, speech_only_0.1 {s01:.1}; \
             (c) {} mixed_1.0 {m10:.1}; pretrain WER {:.2}; {:.0}s",
            ok_ab(a),
            ok_ab(b),
            ok_ab(c),
            r.pretrain_wer,
            r.total_seconds
        ),
    )
}

fn ok_ab(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

/// Pretrained checkpoint bytes, adapted checkpoint bytes and scores.
type RunDigest = (Vec<u8>, Vec<u8>, Vec<f64>);

/// Pretrains and adapts a small model.
fn small_run() -> Result<RunDigest, String> {
    let asr = small_corpus(SynthTask::Asr, 16, 31)?;
    let slu = small_corpus(SynthTask::Slu, 16, 32)?;
    let norm = NormStats::compute(asr.train.iter().map(|u| &u.frames)).map_err(err)?;
    let ctx = context(norm, true);
    let base_set = default_symbol_set();
    let spec = TargetSpec {
        output: base_set.clone(),
        textogram: base_set.clone(),
        tags: None,
    };
    let train: Vec<Example> =
        examples_from_utterances(&asr.train, &spec, &ctx.pipeline, &ctx.textogram, true, true).map_err(err)?;
    let init = Model::new(
        ModelConfig {
            input_dim: 324,
            enc_layers: 1,
            enc_cells: 8,
            bidirectional_encoder: true,
            pred_cells: 8,
            joint_dim: 16,
            vocab_size: base_set.len(),
        },
        11,
    )
    .map_err(err)?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        warmup_epochs: 0.5,
        seed: 12,
        ..TrainConfig::default()
    };
    let base = pretrain(init, &train, &cfg, &ctx, &mut Quiet).map_err(err)?;

    let symbols = slu_symbols(slu.train.iter().chain(&slu.test).map(|u| &u.labels));
    let (_, set) = prepare_adaptation(&base, &base_set, &symbols, 0).map_err(err)?;
    let slu_spec = TargetSpec {
        output: set.clone(),
        textogram: base_set.clone(),
        tags: Some(Default::default()),
    };
    let slu_train =
        examples_from_utterances(&slu.train, &slu_spec, &ctx.pipeline, &ctx.textogram, true, true).map_err(err)?;
    let slu_test =
        examples_from_utterances(&slu.test, &slu_spec, &ctx.pipeline, &ctx.textogram, true, false).map_err(err)?;
    let acfg = TrainConfig {
        regime: Regime::AdaptMixed,
        speech_fraction: 0.5,
        ..cfg
    };
    let adapted =
        textslu::trainer::adapt(&base, &base_set, &symbols, &slu_train, &acfg, &ctx, &mut Quiet).map_err(err)?;
    let hyps = decode_examples(&adapted, &slu_test, &ctx, &set).map_err(err)?;
    let scores = score(
        &hyps,
        &references(&slu_test, &set),
        &[Metric::IntentAccuracy, Metric::Wer],
        "",
    )
    .map_err(err)?
    .iter()
    .map(|s| s.value)
    .collect();
    Ok((checkpoint::encode(&base), checkpoint::encode(&adapted), scores))
}

fn determinism() -> Outcome {
    let a = small_run()?;
    let b = small_run()?;
    check(
        a == b,
        format!(
            "pretrain checkpoint {}, adapted checkpoint {}, metrics {:?} vs {:?}",
            ok(a.0 == b.0),
            ok(a.1 == b.1),
            a.2,
            b.2
        ),
    )
}

fn negative_control() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_textslu"))
        .args(["gradcheck", "--seeds", "2", "--perturb", "--out"])
        .arg(dir.path().join("gc"))
        .output()
        .map_err(err)?;
    let code = out.status.code();
    check(
        code.is_some_and(|c| c != 0),
        format!("gradcheck --perturb exited with {code:?}"),
    )
}

fn main() -> ExitCode {
    // Skipping the trend run fails the criteria that depend on it.
    let trend = if std::env::var_os("ACCEPTANCE_SKIP_TREND").is_some() {
        Err("skipped via ACCEPTANCE_SKIP_TREND".to_string())
    } else {
        eprintln!("running the trend experiment (several minutes)...");
        run_trend(&TrendConfig::default(), &standard_runs(), &mut |m| eprintln!("  {m}")).map_err(err)
    };

    let results: Vec<(&str, Outcome)> = vec![
        ("1 loss oracle", loss_oracle()),
        ("2 gradient oracle", gradient_oracle()),
        ("3 textogram exactness", textogram_exactness()),
        ("4 dimension contract", dimension_contract()),
        ("5 freezing contract", freezing_contract(&trend)),
        ("6 vocabulary extension", vocabulary_extension()),
        ("7 schedule contract", schedule_contract()),
        ("8 trend reproduction", trend_reproduction(&trend)),
        ("9 determinism", determinism()),
        ("10 negative control", negative_control()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
