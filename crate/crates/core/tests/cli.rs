use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textslu"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn textslu")
}

/// Path as a `'static` string so argument vectors can mix literals and paths.
fn p(path: &Path) -> &'static str {
    Box::leak(path.to_str().unwrap().to_string().into_boxed_str())
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn synth_single_utterance_is_two_lines_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_ok(&run(&["synth", "--utterances", "1", "--seed", "7", "--out", p(d)]));
    }
    assert_eq!(lines(&a.join("train.jsonl")), 2);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    let run_json = fs::read_to_string(a.join("run.json")).unwrap();
    assert!(run_json.contains("config_hash") && run_json.contains("\"seed\": 7"));
}

#[test]
fn synth_split_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    assert_ok(&run(&[
        "synth",
        "--utterances",
        "5000",
        "--intents",
        "16",
        "--out",
        p(&out),
    ]));
    assert_eq!(lines(&out.join("train.jsonl")), 2 * 4000);
    assert_eq!(lines(&out.join("test.jsonl")), 2 * 1000);
    assert_eq!(fs::read_dir(out.join("feats")).unwrap().count(), 5000);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(&["synth", "--intents", "0", "--out", p(tmp.path())]).status.code(),
        Some(2)
    );
    // A non-empty output directory needs --resume.
    let out = tmp.path().join("s");
    assert_ok(&run(&["synth", "--utterances", "2", "--out", p(&out)]));
    assert_eq!(
        run(&["synth", "--utterances", "2", "--out", p(&out)]).status.code(),
        Some(2)
    );
    assert_ok(&run(&["synth", "--utterances", "2", "--out", p(&out), "--resume"]));
    // Missing base checkpoint.
    let o = run(&[
        "adapt",
        "--base-checkpoint",
        p(&tmp.path().join("nope")),
        "--manifest",
        p(&out.join("train.jsonl")),
        "--slu-symbols",
        "auto",
        "--regime",
        "text_only",
        "--out",
        p(&tmp.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mixed_regime_requires_speech() {
    let o = run(&[
        "adapt",
        "--base-checkpoint",
        "x",
        "--manifest",
        "y",
        "--slu-symbols",
        "auto",
        "--regime",
        "mixed",
        "--speech-fraction",
        "0",
        "--out",
        "z",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires speech"));
}

#[test]
fn gradcheck_and_negative_control() {
    let o = run(&["gradcheck", "--seeds", "1", "--model-seeds", "1"]);
    assert_ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("lattices 64"));
    let bad = run(&["gradcheck", "--seeds", "1", "--model-seeds", "1", "--perturb"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.cfg");
    fs::write(&cfg, "# corpus\nutterances=10\ntest_fraction=0.5\nseed=3\n").unwrap();
    let out = tmp.path().join("o");
    assert_ok(&run(&[
        "synth",
        "--config",
        p(&cfg),
        "--utterances",
        "4",
        "--out",
        p(&out),
    ]));
    assert_eq!(lines(&out.join("train.jsonl")), 4);
    assert_eq!(lines(&out.join("test.jsonl")), 4);
    assert!(fs::read_to_string(out.join("run.json"))
        .unwrap()
        .contains("\"seed\": 3"));
    fs::write(&cfg, "no_such_key=1\n").unwrap();
    let o = run(&["synth", "--config", p(&cfg), "--out", p(&tmp.path().join("q"))]);
    assert_eq!(o.status.code(), Some(2));
}

const TINY_MODEL: &[&str] = &[
    "--enc-layers",
    "1",
    "--enc-cells",
    "8",
    "--pred-cells",
    "8",
    "--joint-dim",
    "32",
];

const FAST_TRAIN: &[&str] = &[
    "--batch-size",
    "2",
    "--start-lr",
    "0.03",
    "--max-lr",
    "0.03",
    "--warmup-epochs",
    "0",
    "--weight-decay",
    "0",
    "--augment",
    "false",
    "--mask-prob",
    "0",
];

fn args(base: &[&'static str], extra: &[&[&'static str]]) -> Vec<&'static str> {
    let mut v = base.to_vec();
    for e in extra {
        v.extend_from_slice(e);
    }
    v
}

/// Writes a manifest (speech plus text mirror per transcript) whose frames
/// are a fixed pattern per character, so a tiny model can memorise it quickly.
fn handmade_corpus(dir: &Path, utts: &[(&str, Option<&str>)]) -> PathBuf {
    fs::create_dir_all(dir.join("feats")).unwrap();
    let mut manifest = String::new();
    for (k, (transcript, intent)) in utts.iter().enumerate() {
        let mut data = Vec::new();
        for c in transcript.chars() {
            for _ in 0..6 {
                data.extend((0..40).map(|j| ((c as u32 as f64) * 0.37 + j as f64 * 1.3).sin()));
            }
        }
        let m = textslu::linalg::Matrix::from_vec(data.len() / 40, 40, data);
        textslu::featpipe::write_features(&dir.join(format!("feats/u{k}.feat")), &m).unwrap();
        let labels = match intent {
            Some(i) => format!("{{\"intent\":\"{i}\"}}"),
            None => "{}".to_string(),
        };
        manifest += &format!(
            "{{\"id\":\"u{k}\",\"modality\":\"speech\",\"transcript\":\"{transcript}\",\"labels\":{labels},\"features\":\"feats/u{k}.feat\"}}\n\
             {{\"id\":\"u{k}-text\",\"modality\":\"text\",\"transcript\":\"{transcript}\",\"labels\":{labels}}}\n"
        );
    }
    let path = dir.join("train.jsonl");
    fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn overfit_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |n: &str| tmp.path().join(n);
    let asr_manifest = handmade_corpus(&t("asr"), &[("ab", None), ("ba a", None), ("b", None)]);
    let pre = args(
        &[
            "pretrain",
            "--manifest",
            p(&asr_manifest),
            "--epochs",
            "200",
            "--out",
            p(&t("pre")),
        ],
        &[TINY_MODEL, FAST_TRAIN],
    );
    assert_ok(&run(&pre));
    assert!(t("pre").join("model.ckpt").exists());
    assert!(t("pre").join("epoch-199.ckpt").exists());
    let log = fs::read_to_string(t("pre").join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 600);
    assert!(log.lines().all(|l| l.contains("\"modality_mix\":{\"speech\":")));
    let o = run(&[
        "eval",
        "--checkpoint",
        p(&t("pre")),
        "--manifest",
        p(&asr_manifest),
        "--out",
        p(&t("eval_pre")),
    ]);
    assert_ok(&o);
    let res: serde_json::Value =
        serde_json::from_slice(&fs::read(t("eval_pre").join("results.json")).unwrap()).unwrap();
    assert_eq!(res[0]["metric"], "wer");
    assert_eq!(res[0]["value"], 0.0, "final step: {}", log.lines().last().unwrap());

    let slu_manifest = handmade_corpus(
        &t("slu"),
        &[("ab", Some("one")), ("ba a", Some("two")), ("b", Some("one"))],
    );
    let ad = args(
        &[
            "adapt",
            "--base-checkpoint",
            p(&t("pre")),
            "--manifest",
            p(&slu_manifest),
            "--slu-symbols",
            "auto",
            "--regime",
            "mixed",
            "--speech-fraction",
            "1",
            "--epochs",
            "200",
            "--out",
            p(&t("ad")),
        ],
        &[FAST_TRAIN],
    );
    assert_ok(&run(&ad));
    let symbols = fs::read_to_string(t("ad").join("symbols.txt")).unwrap();
    assert!(symbols.lines().any(|l| l.starts_with("INTENT_")));
    let o = run(&[
        "eval",
        "--checkpoint",
        p(&t("ad")),
        "--manifest",
        p(&slu_manifest),
        "--out",
        p(&t("eval_ad")),
    ]);
    assert_ok(&o);
    let res: serde_json::Value = serde_json::from_slice(&fs::read(t("eval_ad").join("results.json")).unwrap()).unwrap();
    assert_eq!(res[0]["metric"], "intent_accuracy");
    assert_eq!(res[0]["value"], 100.0);
    assert_eq!(res[1]["metric"], "wer");

    let o = run(&[
        "decode",
        "--checkpoint",
        p(&t("ad")),
        "--manifest",
        p(&slu_manifest),
        "--out",
        p(&t("dec")),
    ]);
    assert_ok(&o);
    let hyp = fs::read_to_string(t("dec").join("hyps.jsonl")).unwrap();
    assert!(hyp.contains("⟦INTENT_"), "{hyp}");

    // Evaluating the SLU manifest with the ASR checkpoint only scores WER;
    // an empty manifest is an error.
    fs::write(t("empty.jsonl"), "").unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        p(&t("pre")),
        "--manifest",
        p(&t("empty.jsonl")),
        "--out",
        p(&t("e3")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runs_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |n: &str| tmp.path().join(n);
    assert_ok(&run(&[
        "synth",
        "--task",
        "asr",
        "--utterances",
        "6",
        "--test-fraction",
        "0.3",
        "--out",
        p(&t("c")),
    ]));
    for (name, workers) in [("a", "1"), ("b", "1"), ("w", "2")] {
        let pre = args(
            &[
                "pretrain",
                "--manifest",
                p(&t("c").join("train.jsonl")),
                "--epochs",
                "2",
                "--workers",
                workers,
                "--out",
                p(&t(name)),
            ],
            &[TINY_MODEL],
        );
        assert_ok(&run(&pre));
        let ev = [
            "eval",
            "--checkpoint",
            p(&t(name)),
            "--manifest",
            p(&t("c").join("test.jsonl")),
            "--out",
            p(&t(&format!("{name}_eval"))),
        ];
        assert_ok(&run(&ev));
    }
    let model = |n: &str| fs::read(t(n).join("model.ckpt")).unwrap();
    assert_eq!(model("a"), model("b"));
    assert_eq!(model("a"), model("w"));
    // The config hash covers the output paths, so compare the scores only.
    let res = |n: &str| {
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(t(&format!("{n}_eval")).join("results.json")).unwrap()).unwrap();
        v.as_array()
            .unwrap()
            .iter()
            .map(|r| (r["metric"].clone(), r["value"].clone(), r["n_utts"].clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(res("a"), res("b"));
    assert_eq!(res("a"), res("w"));
}

#[test]
fn non_finite_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |n: &str| tmp.path().join(n);
    assert_ok(&run(&[
        "synth",
        "--task",
        "asr",
        "--utterances",
        "2",
        "--out",
        p(&t("c")),
    ]));
    let pre = args(
        &[
            "pretrain",
            "--manifest",
            p(&t("c").join("train.jsonl")),
            "--epochs",
            "3",
            "--start-lr",
            "1e300",
            "--max-lr",
            "1e300",
            "--warmup-epochs",
            "0",
            "--out",
            p(&t("p")),
        ],
        &[TINY_MODEL],
    );
    let o = run(&pre);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
