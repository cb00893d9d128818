//! Seeded synthetic corpora.
//!
//! "Speech" is a sequence of base frames built by concatenating one
//! Gaussian prototype vector per grapheme, each held for a sampled
//! duration, plus per-frame noise, a per-utterance speaker offset and a
//! per-corpus channel offset. Transcripts come from small template
//! grammars over pseudo-words.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::manifest::{write_manifest, ManifestEntry};
use super::{CorpusError, EntitySpan, SluLabels};
use crate::featpipe::{write_features, Modality};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded, Rng};
use crate::symbols::default_graphemes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SynthTask {
    /// Random word strings with no semantic labels.
    Asr,
    /// Keyword templates labelled with intents, and optionally entities and dialog acts.
    #[default]
    Slu,
}

impl std::str::FromStr for SynthTask {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "asr" => Ok(Self::Asr),
            "slu" | "intent" => Ok(Self::Slu),
            other => Err(format!("unknown synthesis task {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub task: SynthTask,
    pub n_intents: usize,
    pub n_entity_types: usize,
    pub n_dialog_acts: usize,
    /// Lexicon size for the ASR task; the SLU grammar sizes its own lexicon.
    pub vocab_size: usize,
    pub utterances: usize,
    pub test_fraction: f64,
    pub proto_dim: usize,
    pub proto_jitter: f64,
    pub speaker_sigma: f64,
    pub channel_sigma: f64,
    pub duration_min: usize,
    pub duration_max: usize,
    /// Seeds the grapheme prototypes. Corpora that should share an
    /// acoustic space share this seed.
    pub prototype_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task: SynthTask::Slu,
            n_intents: 16,
            n_entity_types: 0,
            n_dialog_acts: 0,
            vocab_size: 120,
            utterances: 5000,
            test_fraction: 0.2,
            proto_dim: 40,
            proto_jitter: 0.5,
            speaker_sigma: 0.3,
            channel_sigma: 0.0,
            duration_min: 3,
            duration_max: 6,
            prototype_seed: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_intents == 0 || self.vocab_size == 0 || self.utterances == 0 || self.proto_dim == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.proto_jitter >= 0.0 && self.speaker_sigma >= 0.0 && self.channel_sigma >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return bad("duration range must satisfy 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        (self.test_fraction * self.utterances as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub labels: SluLabels,
    /// Base frames, `[T, proto_dim]`, already rounded to `f32` precision
    /// so they survive a round trip through a feature file.
    pub frames: Matrix,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// Template prior of each intent, in intent order.
    pub intent_priors: Vec<(String, f64)>,
}

/// Pseudo-words of 3 to 5 letters from alternating consonants and vowels.
fn pseudo_words(n: usize, rng: &mut Rng, taken: &mut BTreeSet<String>) -> Vec<String> {
    const C: &[u8] = b"bcdfghjklmnprstvwz";
    const V: &[u8] = b"aeiouy";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(3..=5);
        let start_vowel = rng.gen_bool(0.3);
        let w: String = (0..len)
            .map(|i| {
                let pool = if (i % 2 == 0) != start_vowel { C } else { V };
                pool[rng.gen_range(0..pool.len())] as char
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Template grammar for the SLU task: each intent owns two synonymous
/// keywords, surrounded by optional carrier words.
struct SluGrammar {
    keywords: Vec<[String; 2]>,
    fillers: Vec<String>,
    /// Per entity type: a trigger word and four values.
    entity_types: Vec<(String, String, Vec<String>)>,
    acts: Vec<(String, String)>,
}

impl SluGrammar {
    fn new(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let mut taken = BTreeSet::new();
        let keywords = pseudo_words(2 * cfg.n_intents, rng, &mut taken)
            .chunks(2)
            .map(|c| [c[0].clone(), c[1].clone()])
            .collect();
        let fillers = pseudo_words(6, rng, &mut taken);
        let entity_types = (0..cfg.n_entity_types)
            .map(|k| {
                let trigger = pseudo_words(1, rng, &mut taken).remove(0);
                (format!("slot{k}"), trigger, pseudo_words(4, rng, &mut taken))
            })
            .collect();
        let acts = (0..cfg.n_dialog_acts)
            .map(|k| (format!("act{k}"), pseudo_words(1, rng, &mut taken).remove(0)))
            .collect();
        Self {
            keywords,
            fillers,
            entity_types,
            acts,
        }
    }

    fn intent_name(i: usize) -> String {
        format!("i{i:02}")
    }

    fn sample(&self, n_intents: usize, rng: &mut Rng) -> (String, SluLabels) {
        let intent = rng.gen_range(0..n_intents);
        let mut words: Vec<String> = Vec::new();
        let mut acts = Vec::new();
        if !self.acts.is_empty() {
            let k = rng.gen_range(1..=self.acts.len().min(2));
            let mut chosen: Vec<usize> = (0..self.acts.len()).collect();
            chosen.shuffle(rng);
            chosen.truncate(k);
            chosen.sort_unstable();
            for c in chosen {
                words.push(self.acts[c].1.clone());
                acts.push(self.acts[c].0.clone());
            }
        }
        if rng.gen_bool(0.5) {
            words.push(self.fillers[rng.gen_range(0..self.fillers.len())].clone());
        }
        words.push(self.keywords[intent][rng.gen_range(0..2)].clone());
        let mut entities = Vec::new();
        if !self.entity_types.is_empty() && rng.gen_bool(0.7) {
            let (kind, trigger, values) = &self.entity_types[rng.gen_range(0..self.entity_types.len())];
            words.push(trigger.clone());
            entities.push(EntitySpan {
                kind: kind.clone(),
                start: words.len(),
                end: words.len() + 1,
            });
            words.push(values[rng.gen_range(0..values.len())].clone());
        }
        if rng.gen_bool(0.3) {
            words.push(self.fillers[rng.gen_range(0..self.fillers.len())].clone());
        }
        let labels = SluLabels {
            intent: Some(Self::intent_name(intent)),
            entities,
            dialog_acts: if self.acts.is_empty() { None } else { Some(acts) },
        };
        (words.join(" "), labels)
    }
}

/// One prototype per default grapheme, seeded by `prototype_seed`.
fn prototypes(cfg: &SynthConfig) -> Vec<(char, Vec<f64>)> {
    let mut rng = seeded(derive_seed(cfg.prototype_seed, &[0x9807]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    default_graphemes()
        .into_iter()
        .map(|g| {
            let c = g.chars().next().expect("single-char grapheme");
            (c, (0..cfg.proto_dim).map(|_| normal.sample(&mut rng)).collect())
        })
        .collect()
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("non-negative sigma")
}

/// Renders a transcript as base frames.
fn realize(transcript: &str, protos: &[(char, Vec<f64>)], channel: &[f64], cfg: &SynthConfig, rng: &mut Rng) -> Matrix {
    let dim = cfg.proto_dim;
    let speaker: Vec<f64> = (0..dim).map(|_| gaussian(cfg.speaker_sigma).sample(rng)).collect();
    let jitter = gaussian(cfg.proto_jitter);
    let mut data = Vec::new();
    let mut n_frames = 0;
    for ch in transcript.chars() {
        let proto = &protos
            .iter()
            .find(|(c, _)| *c == ch)
            .expect("generator only emits default graphemes")
            .1;
        let d = rng.gen_range(cfg.duration_min..=cfg.duration_max);
        for _ in 0..d {
            for k in 0..dim {
                let v = proto[k] + speaker[k] + channel[k] + jitter.sample(rng);
                data.push(v as f32 as f64);
            }
            n_frames += 1;
        }
    }
    Matrix::from_vec(n_frames, dim, data)
}

/// Generates a corpus. Every utterance draws from its own derived seed.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, CorpusError> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let mut grammar_rng = seeded(derive_seed(cfg.seed, &[0x6A4]));
    let mut channel_rng = seeded(derive_seed(cfg.seed, &[0xC4A]));
    let channel: Vec<f64> = (0..cfg.proto_dim)
        .map(|_| gaussian(cfg.channel_sigma).sample(&mut channel_rng))
        .collect();
    let (prefix, grammar, lexicon) = match cfg.task {
        SynthTask::Slu => ("slu", Some(SluGrammar::new(cfg, &mut grammar_rng)), Vec::new()),
        SynthTask::Asr => (
            "asr",
            None,
            pseudo_words(cfg.vocab_size, &mut grammar_rng, &mut BTreeSet::new()),
        ),
    };
    let mut all = Vec::with_capacity(cfg.utterances);
    for i in 0..cfg.utterances {
        let mut rng = seeded(derive_seed(cfg.seed, &[0x07, i as u64]));
        let (transcript, labels) = match &grammar {
            Some(g) => g.sample(cfg.n_intents, &mut rng),
            None => {
                let n = rng.gen_range(2..=4);
                let words: Vec<&str> = (0..n)
                    .map(|_| lexicon[rng.gen_range(0..lexicon.len())].as_str())
                    .collect();
                (words.join(" "), SluLabels::default())
            }
        };
        let frames = realize(&transcript, &protos, &channel, cfg, &mut rng);
        all.push(Utterance {
            id: format!("{prefix}-{i:05}"),
            transcript,
            labels,
            frames,
        });
    }
    let test = all.split_off(cfg.utterances - cfg.n_test());
    let intent_priors = match cfg.task {
        SynthTask::Slu => (0..cfg.n_intents)
            .map(|i| (SluGrammar::intent_name(i), 1.0 / cfg.n_intents as f64))
            .collect(),
        SynthTask::Asr => Vec::new(),
    };
    Ok(SynthCorpus {
        train: all,
        test,
        intent_priors,
    })
}

/// Id of the text mirror of a speech utterance.
pub fn text_id(id: &str) -> String {
    format!("{id}-text")
}

/// Manifest entries for a split: each speech entry followed by its text mirror.
pub fn manifest_entries(utts: &[Utterance], feature_dir: &str) -> Vec<ManifestEntry> {
    utts.iter()
        .flat_map(|u| {
            [
                ManifestEntry {
                    id: u.id.clone(),
                    modality: Modality::Speech,
                    transcript: u.transcript.clone(),
                    labels: u.labels.clone(),
                    features: Some(format!("{feature_dir}/{}.feat", u.id)),
                },
                ManifestEntry {
                    id: text_id(&u.id),
                    modality: Modality::Text,
                    transcript: u.transcript.clone(),
                    labels: u.labels.clone(),
                    features: None,
                },
            ]
        })
        .collect()
}

/// Writes `feats/*.feat`, `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<(), CorpusError> {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats)?;
    for u in corpus.train.iter().chain(&corpus.test) {
        write_features(&feats.join(format!("{}.feat", u.id)), &u.frames)?;
    }
    write_manifest(&dir.join("train.jsonl"), &manifest_entries(&corpus.train, "feats"))?;
    write_manifest(&dir.join("test.jsonl"), &manifest_entries(&corpus.test, "feats"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::manifest::read_manifest;
    use crate::corpus::tags::{serialize_slu_targets, IntentPlacement};
    use crate::featpipe::read_features;
    use crate::symbols::{default_symbol_set, tokenize, UnknownPolicy};

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            utterances: 40,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_utterance_manifest_has_two_records() {
        let cfg = SynthConfig {
            utterances: 1,
            seed: 7,
            ..SynthConfig::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let train = read_manifest(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(train[0].modality, Modality::Speech);
        assert_eq!(train[1].modality, Modality::Text);
        assert!(train[1].features.is_none());
        let f = read_features(&train[0].feature_path(dir.path()).unwrap()).unwrap();
        assert_eq!(f, corpus.train[0].frames);
        assert!(read_manifest(&dir.path().join("test.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn split_sizes() {
        let corpus = generate_corpus(&small(3)).unwrap();
        assert_eq!(corpus.train.len(), 32);
        assert_eq!(corpus.test.len(), 8);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(&small(5)).unwrap();
        let b = generate_corpus(&small(5)).unwrap();
        assert_eq!(a.train, b.train);
        let c = generate_corpus(&small(6)).unwrap();
        assert_ne!(a.train[0].frames, c.train[0].frames);
    }

    #[test]
    fn noiseless_same_transcript_same_features() {
        let cfg = SynthConfig {
            utterances: 400,
            proto_jitter: 0.0,
            speaker_sigma: 0.0,
            duration_min: 4,
            duration_max: 4,
            ..small(2)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let all: Vec<&Utterance> = corpus.train.iter().chain(&corpus.test).collect();
        let mut found = 0;
        for (i, a) in all.iter().enumerate() {
            if let Some(b) = all[i + 1..].iter().find(|b| b.transcript == a.transcript) {
                assert_eq!(a.frames, b.frames);
                found += 1;
            }
        }
        assert!(found > 0, "no repeated transcript in 400 draws");
    }

    #[test]
    fn frames_follow_transcript_durations() {
        let corpus = generate_corpus(&small(1)).unwrap();
        for u in &corpus.train {
            let n = u.transcript.chars().count();
            assert!(u.frames.rows() >= 3 * n && u.frames.rows() <= 6 * n);
            assert_eq!(u.frames.cols(), 40);
        }
    }

    #[test]
    fn intent_counts_match_priors() {
        for seed in [11, 12] {
            let cfg = SynthConfig {
                utterances: 4000,
                test_fraction: 0.0,
                proto_dim: 1,
                ..small(seed)
            };
            let corpus = generate_corpus(&cfg).unwrap();
            // Pearson statistic against the template priors, compared with
            // the chi-square mean plus three standard deviations.
            let n = corpus.train.len() as f64;
            let mut chi2 = 0.0;
            for (name, p) in &corpus.intent_priors {
                let count = corpus
                    .train
                    .iter()
                    .filter(|u| u.labels.intent.as_deref() == Some(name.as_str()))
                    .count() as f64;
                chi2 += (count - n * p).powi(2) / (n * p);
            }
            let dof = (corpus.intent_priors.len() - 1) as f64;
            assert!(chi2 <= dof + 3.0 * (2.0 * dof).sqrt(), "seed {seed}: chi2 {chi2}");
        }
    }

    #[test]
    fn transcripts_tokenize_and_labels_validate() {
        let cfg = SynthConfig {
            n_entity_types: 2,
            n_dialog_acts: 3,
            ..small(4)
        };
        let set = default_symbol_set();
        let corpus = generate_corpus(&cfg).unwrap();
        for u in &corpus.train {
            tokenize(&u.transcript, &set, UnknownPolicy::Strict).unwrap();
            assert!(!u.labels.is_empty());
            serialize_slu_targets(&u.transcript, &u.labels, IntentPlacement::First).unwrap();
        }
        assert!(corpus.train.iter().any(|u| !u.labels.entities.is_empty()));
    }

    #[test]
    fn asr_task_has_no_labels() {
        let cfg = SynthConfig {
            task: SynthTask::Asr,
            ..small(9)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        assert!(corpus.train.iter().all(|u| u.labels.is_empty()));
        assert!(corpus.train[0].id.starts_with("asr-"));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig {
                n_intents: 0,
                ..small(0)
            },
            SynthConfig {
                proto_jitter: -1.0,
                ..small(0)
            },
            SynthConfig {
                duration_min: 7,
                ..small(0)
            },
        ] {
            assert!(generate_corpus(&cfg).is_err());
        }
    }
}
