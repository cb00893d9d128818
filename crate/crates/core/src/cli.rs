//! Command-line front end.
//!
//! A `--config FILE` of `key=value` lines is expanded into `--key value`
//! flags placed before the user's own flags, so any flag given on the
//! command line overrides the file.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{
    generate_corpus, read_manifest, slu_symbols, synth::write_corpus, IntentPlacement, ManifestEntry, SynthConfig,
    SynthTask,
};
use crate::evaluate::{decode_examples, references, score, Metric};
use crate::featpipe::{read_features, FeaturePipeline, FeaturePipelineConfig, Modality, NormStats};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::network::{checkpoint, Model, ModelConfig};
use crate::rng::{derive_seed, fnv1a64};
use crate::symbols::{default_symbol_set, SymbolSet};
use crate::textogram::TextogramConfig;
use crate::trainer::{
    adapt, examples_from_manifest, pretrain, AdamWConfig, EpochLog, Example, FeatureContext, JsonlLog, Regime, StepLog,
    TargetSpec, TrainConfig, TrainError, TrainObserver,
};

pub const MODEL_FILE: &str = "model.ckpt";
pub const SYMBOLS_FILE: &str = "symbols.txt";
pub const NORM_FILE: &str = "norm.json";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RESULTS_FILE: &str = "results.json";
pub const HYPS_FILE: &str = "hyps.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Other(e.into())
        }
    }
}

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "textslu",
    version,
    about = "Textogram-based multimodal RNN-T training and SLU adaptation"
)]
pub struct Cli {
    /// key=value file; each key is a flag name of the chosen subcommand.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Threads for per-utterance gradients; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    #[serde(skip)]
    pub workers: usize,
    /// Output directory; must be empty or absent unless --resume is given.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory (files are overwritten).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train an ASR model on speech and text-mirror entries.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained model to SLU targets.
    Adapt(AdaptArgs),
    /// Greedy-decode a manifest.
    Decode(DecodeArgs),
    /// Decode and score a manifest.
    Eval(EvalArgs),
    /// Check the loss and gradients numerically.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long, default_value = "slu")]
    pub task: String,
    #[arg(long, default_value_t = 5000)]
    pub utterances: usize,
    #[arg(long, default_value_t = 16)]
    pub intents: usize,
    #[arg(long, default_value_t = 0)]
    pub entity_types: usize,
    #[arg(long, default_value_t = 0)]
    pub dialog_acts: usize,
    #[arg(long, default_value_t = 120)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0.3)]
    pub speaker_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub channel_sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub duration_min: usize,
    #[arg(long, default_value_t = 6)]
    pub duration_max: usize,
    /// Corpora sharing this seed share grapheme prototypes.
    #[arg(long, default_value_t = 1)]
    pub prototype_seed: u64,
}

#[derive(Args, Debug, Serialize, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub start_lr: f64,
    #[arg(long, default_value_t = 2e-4)]
    pub max_lr: f64,
    #[arg(long, default_value_t = 6.0)]
    pub warmup_epochs: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 0.25)]
    pub mask_prob: f64,
    #[arg(long, default_value_t = 4)]
    pub duration_frames: usize,
    /// Speech augmentation: sequence noise injection and block masks.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub augment: bool,
}

impl TrainArgs {
    fn train_config(&self, regime: Regime, speech_fraction: f64, workers: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            start_lr: self.start_lr,
            max_lr: self.max_lr,
            warmup_epochs: self.warmup_epochs,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            clip_norm: self.clip_norm,
            regime,
            speech_fraction,
            workers,
            seed,
        }
    }

    fn textogram(&self) -> TextogramConfig {
        TextogramConfig {
            duration_frames: self.duration_frames,
            mask_prob: self.mask_prob,
            ..TextogramConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct PretrainArgs {
    /// Training manifest (speech entries plus their text mirrors).
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub enc_cells: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub bidirectional: bool,
    #[arg(long, default_value_t = 64)]
    pub pred_cells: usize,
    #[arg(long, default_value_t = 32)]
    pub joint_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AdaptRegime {
    TextOnly,
    Mixed,
    SpeechOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    First,
    Last,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct AdaptArgs {
    /// Directory (or model file) of the pretrained checkpoint.
    #[arg(long)]
    pub base_checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// File with one SLU label per line, or `auto` to collect them from the manifest.
    #[arg(long)]
    pub slu_symbols: String,
    #[arg(long, value_enum)]
    pub regime: AdaptRegime,
    /// Share of speech entries kept; defaults to 0 for text_only and 1 otherwise.
    #[arg(long)]
    pub speech_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "first")]
    pub placement: Placement,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityFilter {
    Speech,
    Text,
    All,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "speech")]
    pub modality: ModalityFilter,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "speech")]
    pub modality: ModalityFilter,
    /// Comma-separated: intent, dialog_act, entity, wer. Defaults to WER plus
    /// whatever SLU labels the checkpoint knows.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    #[arg(long, default_value_t = 2)]
    pub model_seeds: usize,
    /// Corrupt the analytic gradients; the check must then fail.
    #[arg(long)]
    pub perturb: bool,
}

/// Expands `--config FILE` into flags inserted right after the subcommand.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
    let cmd = Cli::command();
    let sub_pos = strs
        .iter()
        .position(|a| cmd.find_subcommand(a).is_some())
        .ok_or_else(|| CliError::Usage("no subcommand given".into()))?;
    let sub = cmd.find_subcommand(&strs[sub_pos]).expect("found above");
    let mut injected = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config {path}:{}: expected key=value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("config {path}:{}: unknown key {k:?}", n + 1)))?;
        if key == "config" {
            return Err(CliError::Usage("config files cannot include other config files".into()));
        }
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}"));
            injected.push(value.to_string());
        } else {
            match value {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(CliError::Usage(format!(
                        "config {path}:{}: {k} takes true or false",
                        n + 1
                    )))
                }
            }
        }
    }
    let mut out: Vec<OsString> = args[..=sub_pos].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(args[sub_pos + 1..].iter().cloned());
    Ok(out)
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args = match expand_config(args.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

/// Stable hash of every setting that can change results.
pub fn config_hash(cli: &Cli) -> String {
    let canon = serde_json::to_string(cli).expect("serializable args");
    format!("{:016x}", fnv1a64(canon.as_bytes()))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a Command,
    seed: u64,
    config_hash: String,
    version: &'static str,
}

fn prepare_out(cli: &Cli) -> Result<PathBuf, CliError> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required for this subcommand".into()))?;
    if out.exists() {
        let nonempty = fs::read_dir(&out).context("reading --out")?.next().is_some();
        if nonempty && !cli.resume {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (pass --resume to reuse it)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(&out).context("creating --out")?;
    let record = RunRecord {
        command: &cli.command,
        seed: cli.seed,
        config_hash: config_hash(cli),
        version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(
        out.join(RUN_FILE),
        serde_json::to_string_pretty(&record).context("run record")? + "\n",
    )
    .context("writing run record")?;
    Ok(out)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Pretrain(a) => cmd_pretrain(cli, a),
        Command::Adapt(a) => cmd_adapt(cli, a),
        Command::Decode(a) => cmd_decode(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        task: a.task.parse::<SynthTask>().map_err(usage)?,
        n_intents: a.intents,
        n_entity_types: a.entity_types,
        n_dialog_acts: a.dialog_acts,
        vocab_size: a.vocab_size,
        utterances: a.utterances,
        test_fraction: a.test_fraction,
        proto_dim: 40,
        proto_jitter: a.jitter,
        speaker_sigma: a.speaker_sigma,
        channel_sigma: a.channel_sigma,
        duration_min: a.duration_min,
        duration_max: a.duration_max,
        prototype_seed: a.prototype_seed,
        seed: cli.seed,
    };
    cfg.validate().map_err(usage)?;
    let out = prepare_out(cli)?;
    let corpus = generate_corpus(&cfg).map_err(|e| anyhow!(e))?;
    write_corpus(&corpus, &out).context("writing corpus")?;
    println!(
        "wrote {} train and {} test utterances to {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn load_manifest(path: &Path) -> Result<(Vec<ManifestEntry>, PathBuf), CliError> {
    let entries = read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((entries, dir))
}

/// Model directory contents: weights, output symbols, normalization.
struct Bundle {
    model: Model,
    symbols: SymbolSet,
    norm: NormStats,
}

fn bundle_dir(p: &Path) -> PathBuf {
    if p.is_file() {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        p.to_path_buf()
    }
}

fn load_bundle(p: &Path) -> Result<Bundle, CliError> {
    let dir = bundle_dir(p);
    let file = if p.is_file() {
        p.to_path_buf()
    } else {
        dir.join(MODEL_FILE)
    };
    if !file.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", file.display())));
    }
    let model = checkpoint::load(&file).map_err(usage)?;
    let symbols = SymbolSet::load(&dir.join(SYMBOLS_FILE)).map_err(usage)?;
    let norm: NormStats =
        serde_json::from_str(&fs::read_to_string(dir.join(NORM_FILE)).context("reading normalization stats")?)
            .context("parsing normalization stats")?;
    if model.vocab_size() != symbols.len() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary {} does not match {} symbols",
            model.vocab_size(),
            symbols.len()
        )));
    }
    Ok(Bundle { model, symbols, norm })
}

fn save_bundle(dir: &Path, model: &Model, symbols: &SymbolSet, norm: &NormStats) -> Result<(), CliError> {
    checkpoint::save(&dir.join(MODEL_FILE), model).map_err(|e| anyhow!(e))?;
    symbols.save(&dir.join(SYMBOLS_FILE)).context("writing symbols")?;
    fs::write(dir.join(NORM_FILE), serde_json::to_string(norm).context("norm stats")?).context("writing norm")?;
    Ok(())
}

/// Textogram inventory: the grapheme part of the output set. Text inputs
/// use it whether or not SLU labels were added later.
fn textogram_set(output: &SymbolSet) -> Result<SymbolSet, CliError> {
    crate::symbols::build_symbol_set(output.graphemes(), &[] as &[String]).map_err(usage)
}

fn context(norm: &NormStats, tset: &SymbolSet, train: Option<&TrainArgs>) -> FeatureContext {
    let pipeline = FeaturePipeline::new(
        FeaturePipelineConfig {
            norm_stats: Some(norm.clone()),
            ..FeaturePipelineConfig::default()
        },
        tset.len(),
    );
    FeatureContext {
        pipeline,
        textogram_set: tset.clone(),
        textogram: train.map(TrainArgs::textogram).unwrap_or_default(),
        augment: train.map(|t| t.augment).unwrap_or(false),
    }
}

/// Step log, per-epoch checkpoints and a progress line per epoch.
struct CliObserver<W: Write> {
    log: JsonlLog<W>,
    dir: PathBuf,
}

impl<W: Write> TrainObserver for CliObserver<W> {
    fn on_step(&mut self, l: &StepLog) -> Result<(), TrainError> {
        self.log.on_step(l)
    }

    fn on_epoch(&mut self, l: &EpochLog, model: &Model) -> Result<(), TrainError> {
        self.log.0.flush()?;
        eprintln!(
            "epoch {} loss {:.4} speech {} text {}",
            l.epoch,
            l.loss,
            l.speech_loss.map_or("-".into(), |v| format!("{v:.4}")),
            l.text_loss.map_or("-".into(), |v| format!("{v:.4}")),
        );
        checkpoint::save(&self.dir.join(format!("epoch-{}.ckpt", l.epoch)), model)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        Ok(())
    }
}

fn observer(out: &Path) -> Result<CliObserver<BufWriter<fs::File>>, CliError> {
    let f = fs::File::create(out.join(LOG_FILE)).context("creating training log")?;
    Ok(CliObserver {
        log: JsonlLog(BufWriter::new(f)),
        dir: out.to_path_buf(),
    })
}

fn cmd_pretrain(cli: &Cli, a: &PretrainArgs) -> Result<(), CliError> {
    let (entries, dir) = load_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(CliError::Usage("empty manifest".into()));
    }
    let set = default_symbol_set();
    let mut frames = Vec::new();
    for e in entries.iter().filter(|e| e.modality == Modality::Speech) {
        let p = e
            .feature_path(&dir)
            .ok_or_else(|| CliError::Usage(format!("speech entry {:?} has no features", e.id)))?;
        frames.push(read_features(&p).map_err(|e| anyhow!(e))?);
    }
    let norm = if frames.is_empty() {
        NormStats::identity(FeaturePipelineConfig::default().base_dim)
    } else {
        NormStats::compute(frames.iter()).map_err(|e| anyhow!(e))?
    };
    let ctx = context(&norm, &set, Some(&a.train));
    let spec = TargetSpec {
        output: set.clone(),
        textogram: set.clone(),
        tags: None,
    };
    let examples = examples_from_manifest(&entries, &dir, &spec, &ctx.pipeline, &ctx.textogram)?;
    let model_cfg = ModelConfig {
        input_dim: ctx.pipeline.dims.total(),
        enc_layers: a.enc_layers,
        enc_cells: a.enc_cells,
        bidirectional_encoder: a.bidirectional,
        pred_cells: a.pred_cells,
        joint_dim: a.joint_dim,
        vocab_size: set.len(),
    };
    model_cfg.validate().map_err(usage)?;
    let tcfg = a
        .train
        .train_config(Regime::Pretrain, 1.0, cli.workers, derive_seed(cli.seed, &[2]));
    tcfg.validate().map_err(usage)?;
    let out = prepare_out(cli)?;
    let init = Model::new(model_cfg, derive_seed(cli.seed, &[1])).map_err(usage)?;
    let mut obs = observer(&out)?;
    let model = pretrain(init, &examples, &tcfg, &ctx, &mut obs)?;
    save_bundle(&out, &model, &set, &norm)?;
    println!("wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn read_slu_symbols(spec: &str, entries: &[ManifestEntry]) -> Result<Vec<String>, CliError> {
    if spec == "auto" {
        return Ok(slu_symbols(entries.iter().map(|e| &e.labels)));
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading SLU symbols {spec}"))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn cmd_adapt(cli: &Cli, a: &AdaptArgs) -> Result<(), CliError> {
    let (regime, default_fraction) = match a.regime {
        AdaptRegime::TextOnly => (Regime::AdaptTextOnly, 0.0),
        AdaptRegime::Mixed => (Regime::AdaptMixed, 1.0),
        AdaptRegime::SpeechOnly => (Regime::AdaptSpeechOnly, 1.0),
    };
    let fraction = a.speech_fraction.unwrap_or(default_fraction);
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CliError::Usage("--speech-fraction must lie in [0, 1]".into()));
    }
    match a.regime {
        AdaptRegime::TextOnly if fraction > 0.0 => {
            return Err(CliError::Usage(
                "text_only regime uses no speech; pass --speech-fraction 0".into(),
            ))
        }
        AdaptRegime::Mixed | AdaptRegime::SpeechOnly if fraction == 0.0 => {
            return Err(CliError::Usage(format!(
                "{} regime requires speech (--speech-fraction > 0)",
                if a.regime == AdaptRegime::Mixed {
                    "mixed"
                } else {
                    "speech_only"
                }
            )))
        }
        _ => {}
    }
    let base = load_bundle(&a.base_checkpoint)?;
    let (entries, dir) = load_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(CliError::Usage("empty manifest".into()));
    }
    let labels = read_slu_symbols(&a.slu_symbols, &entries)?;
    let output = base.symbols.extend(&labels).map_err(usage)?;
    let tset = textogram_set(&base.symbols)?;
    let ctx = context(&base.norm, &tset, Some(&a.train));
    let spec = TargetSpec {
        output: output.clone(),
        textogram: tset,
        tags: Some(match a.placement {
            Placement::First => IntentPlacement::First,
            Placement::Last => IntentPlacement::Last,
        }),
    };
    let examples: Vec<Example> = examples_from_manifest(&entries, &dir, &spec, &ctx.pipeline, &ctx.textogram)?;
    let tcfg = a
        .train
        .train_config(regime, fraction, cli.workers, derive_seed(cli.seed, &[3]));
    tcfg.validate().map_err(usage)?;
    let out = prepare_out(cli)?;
    let mut obs = observer(&out)?;
    let model = adapt(&base.model, &base.symbols, &labels, &examples, &tcfg, &ctx, &mut obs)?;
    save_bundle(&out, &model, &output, &base.norm)?;
    println!("wrote {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn eval_examples(
    b: &Bundle,
    manifest: &Path,
    filter: ModalityFilter,
) -> Result<(Vec<Example>, FeatureContext), CliError> {
    let (entries, dir) = load_manifest(manifest)?;
    let entries: Vec<ManifestEntry> = entries
        .into_iter()
        .filter(|e| match filter {
            ModalityFilter::All => true,
            ModalityFilter::Speech => e.modality == Modality::Speech,
            ModalityFilter::Text => e.modality == Modality::Text,
        })
        .collect();
    if entries.is_empty() {
        return Err(CliError::Usage("empty test manifest".into()));
    }
    let tset = textogram_set(&b.symbols)?;
    let ctx = context(&b.norm, &tset, None);
    let spec = TargetSpec {
        output: b.symbols.clone(),
        textogram: tset,
        tags: (b.symbols.n_slu_labels() > 0).then_some(IntentPlacement::First),
    };
    let examples = examples_from_manifest(&entries, &dir, &spec, &ctx.pipeline, &ctx.textogram)
        .map_err(|e| CliError::Usage(format!("manifest does not fit the checkpoint: {e}")))?;
    Ok((examples, ctx))
}

#[derive(Serialize)]
struct HypLine<'a> {
    id: &'a str,
    hypothesis: &'a str,
}

fn cmd_decode(cli: &Cli, a: &DecodeArgs) -> Result<(), CliError> {
    let b = load_bundle(&a.checkpoint)?;
    let (examples, ctx) = eval_examples(&b, &a.manifest, a.modality)?;
    let out = prepare_out(cli)?;
    let hyps = decode_examples(&b.model, &examples, &ctx, &b.symbols)?;
    let mut w = BufWriter::new(fs::File::create(out.join(HYPS_FILE)).context("creating hypotheses file")?);
    for (id, h) in &hyps {
        let line = serde_json::to_string(&HypLine { id, hypothesis: h }).context("hypothesis")?;
        writeln!(w, "{line}").context("writing hypotheses")?;
        println!("{id}\t{h}");
    }
    w.flush().context("writing hypotheses")?;
    Ok(())
}

fn default_metrics(symbols: &SymbolSet) -> Vec<Metric> {
    let labels = symbols.slu_labels();
    let mut m = Vec::new();
    if labels.iter().any(|l| l.starts_with(crate::corpus::tags::INTENT_PREFIX)) {
        m.push(Metric::IntentAccuracy);
    }
    if labels
        .iter()
        .any(|l| l.starts_with(crate::corpus::tags::ENTITY_BEGIN_PREFIX))
    {
        m.push(Metric::EntityF1);
    }
    if labels
        .iter()
        .any(|l| l.starts_with(crate::corpus::tags::DIALOG_ACT_PREFIX))
    {
        m.push(Metric::DialogActF1);
    }
    m.push(Metric::Wer);
    m
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<(), CliError> {
    let b = load_bundle(&a.checkpoint)?;
    let metrics = if a.metrics.is_empty() {
        default_metrics(&b.symbols)
    } else {
        a.metrics
            .iter()
            .map(|m| m.parse::<Metric>().map_err(usage))
            .collect::<Result<_, _>>()?
    };
    let (examples, ctx) = eval_examples(&b, &a.manifest, a.modality)?;
    let out = prepare_out(cli)?;
    let hyps = decode_examples(&b.model, &examples, &ctx, &b.symbols)?;
    let refs = references(&examples, &b.symbols);
    let results = score(&hyps, &refs, &metrics, &config_hash(cli)).map_err(usage)?;
    let json = serde_json::to_string_pretty(&results).context("results")?;
    fs::write(out.join(RESULTS_FILE), json.clone() + "\n").context("writing results")?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<(), CliError> {
    let cfg = GradcheckConfig {
        seeds: a.seeds,
        model_seeds: a.model_seeds,
        perturb: a.perturb,
        seed: cli.seed,
        ..GradcheckConfig::default()
    };
    let r = run_gradcheck(&cfg).map_err(|e| anyhow!(e))?;
    println!(
        "lattices {} max loss err {:.3e} max logit grad rel err {:.3e}",
        r.lattice_cases, r.max_loss_err, r.max_logit_rel_err
    );
    println!(
        "parameter cases {} max param grad rel err {:.3e}",
        r.param_cases, r.max_param_rel_err
    );
    if cli.out.is_some() {
        let out = prepare_out(cli)?;
        let json = serde_json::json!({
            "lattice_cases": r.lattice_cases,
            "max_loss_err": r.max_loss_err,
            "max_logit_rel_err": r.max_logit_rel_err,
            "param_cases": r.param_cases,
            "max_param_rel_err": r.max_param_rel_err,
            "passed": r.passed(),
        });
        fs::write(out.join("gradcheck.json"), json.to_string() + "\n").context("writing report")?;
    }
    if !r.passed() {
        return Err(CliError::Numerical("gradient check outside tolerance".into()));
    }
    println!("ok");
    Ok(())
}
