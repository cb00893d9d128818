//! Runs the synthetic trend experiment and prints progress.
//!
//! `cargo run --release --example trend`
//!
//! Environment overrides for quick exploration: `PLACEMENT` (first|last),
//! `PRETRAIN_EPOCHS`, `ADAPT_EPOCHS`, `ADAPT_LR`, `CHANNEL`, `CELLS`, `AUGMENT`, `ASR_CHANNEL`, `ENC_LAYERS`, `PRETRAIN_LR`, `ASR_VOCAB`, `ASR_UTTS`, `MASK`, `JITTER`
//! (textogram durations become `3 + U{0..=JITTER}`), `RUNS` (comma list of run
//! names) and `SHOW` (hypotheses to print per run).

use textslu::experiment::{run_trend, standard_runs, TrendConfig};

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn main() -> anyhow::Result<()> {
    let mut cfg = TrendConfig::default();
    if let Some(p) = env("PLACEMENT") {
        cfg.placement = p;
    }
    if let Some(e) = env("PRETRAIN_EPOCHS") {
        cfg.pretrain.epochs = e;
    }
    if let Some(e) = env("ADAPT_EPOCHS") {
        cfg.adapt.epochs = e;
    }
    if let Some(lr) = env::<f64>("ADAPT_LR") {
        cfg.adapt.max_lr = lr;
        cfg.adapt.start_lr = lr / 10.0;
    }
    if let Some(c) = env("CHANNEL") {
        cfg.slu.channel_sigma = c;
    }
    if let Some(c) = env("CELLS") {
        cfg.model.enc_cells = c;
    }
    if let Some(c) = env("ASR_CHANNEL") {
        cfg.asr.channel_sigma = c;
    }
    if let Some(l) = env("ENC_LAYERS") {
        cfg.model.enc_layers = l;
    }
    if let Some(e) = env("PRETRAIN_LR") {
        let lr: f64 = e;
        cfg.pretrain.max_lr = lr;
        cfg.pretrain.start_lr = lr / 10.0;
    }
    if let Some(v) = env("ASR_VOCAB") {
        cfg.asr.vocab_size = v;
    }
    if let Some(n) = env("ASR_UTTS") {
        cfg.asr.utterances = n;
    }
    if let Some(m) = env("MASK") {
        cfg.textogram.mask_prob = m;
    }
    if let Some(j) = env("JITTER") {
        cfg.textogram.duration_frames = 3;
        cfg.textogram.duration_jitter = j;
    }
    if let Some(a) = env("AUGMENT") {
        cfg.augment = a;
    }
    let mut runs = standard_runs();
    if let Ok(only) = std::env::var("RUNS") {
        runs.retain(|r| only.split(',').any(|n| n == r.name));
    }
    let report = run_trend(&cfg, &runs, &mut |m| eprintln!("{m}"))?;
    let show: usize = env("SHOW").unwrap_or(0);
    for r in &report.runs {
        for ((id, hyp), (_, reference)) in r.hyps.iter().zip(&report.references).take(show) {
            eprintln!("{} {id}\n  ref {reference}\n  hyp {hyp}", r.name);
        }
    }
    for r in &report.runs {
        println!("{:<16} intent {:6.2}  wer {:6.2}", r.name, r.intent_accuracy, r.wer);
    }
    println!(
        "pretrain wer {:.2}, total {:.0}s",
        report.pretrain_wer, report.total_seconds
    );
    Ok(())
}
