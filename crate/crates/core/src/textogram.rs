//! Frame-level one-hot text features.
//!
//! A transcript becomes a `[n_frames × |V|]` matrix in which each symbol spans
//! a block of consecutive frames. Label masking, block-level confusions,
//! variable durations and pronunciation variants add variability so the
//! encoder cannot simply memorize the text.

use rand::Rng as _;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded};
use crate::symbols::{LabelSequence, SymbolSet};

#[derive(Debug, Error, PartialEq)]
pub enum TextogramError {
    #[error("duration_frames must be >= 1")]
    ZeroDuration,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("symbol id {0} is blank or outside the textogram inventory")]
    BadId(usize),
    #[error("confusion references unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("need at least one pronunciation variant with a matching weight")]
    NoVariants,
    #[error("pronunciation weights sum to {0}, expected 1")]
    WeightSum(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionPair {
    pub from: String,
    pub to: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextogramConfig {
    pub duration_frames: usize,
    pub duration_jitter: usize,
    pub mask_prob: f64,
    pub confusion_pairs: Vec<ConfusionPair>,
    pub seed: u64,
}

impl Default for TextogramConfig {
    fn default() -> Self {
        Self {
            duration_frames: 4,
            duration_jitter: 0,
            mask_prob: 0.25,
            confusion_pairs: Vec::new(),
            seed: 0,
        }
    }
}

impl TextogramConfig {
    pub fn validate(&self) -> Result<(), TextogramError> {
        if self.duration_frames == 0 {
            return Err(TextogramError::ZeroDuration);
        }
        check_prob(self.mask_prob)?;
        for c in &self.confusion_pairs {
            check_prob(c.prob)?;
        }
        Ok(())
    }
}

fn check_prob(p: f64) -> Result<(), TextogramError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(TextogramError::BadProbability(p))
    }
}

/// Frame-level one-hot matrix stored as the active column per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Textogram {
    active: Vec<Option<usize>>,
    n_cols: usize,
    /// `(start_frame, n_frames)` for each source symbol, in order.
    blocks: Vec<(usize, usize)>,
    source_ids: LabelSequence,
}

impl Textogram {
    pub fn n_frames(&self) -> usize {
        self.active.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn source_ids(&self) -> &LabelSequence {
        &self.source_ids
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    /// Active column of each frame, `None` where masked.
    pub fn active(&self) -> &[Option<usize>] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|a| a.is_some()).count()
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.active.len(), self.n_cols);
        for (t, a) in self.active.iter().enumerate() {
            if let Some(col) = a {
                m.set(t, *col, 1.0);
            }
        }
        m
    }
}

/// Lays each symbol out over `duration_frames + U{0..=duration_jitter}`
/// frames. No masking is applied here.
pub fn build_textogram(
    ids: &LabelSequence,
    cfg: &TextogramConfig,
    set: &SymbolSet,
) -> Result<Textogram, TextogramError> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let mut active = Vec::with_capacity(ids.len() * cfg.duration_frames);
    let mut blocks = Vec::with_capacity(ids.len());
    for &id in ids.ids() {
        if id == set.blank_index() || id >= set.len() {
            return Err(TextogramError::BadId(id));
        }
        let extra = if cfg.duration_jitter > 0 {
            rng.gen_range(0..=cfg.duration_jitter)
        } else {
            0
        };
        let d = cfg.duration_frames + extra;
        blocks.push((active.len(), d));
        active.extend(std::iter::repeat_n(Some(id), d));
    }
    Ok(Textogram {
        active,
        n_cols: set.len(),
        blocks,
        source_ids: ids.clone(),
    })
}

/// Replaces whole symbol blocks with a confusable symbol. One draw per block
/// and confusion entry; the first entry that fires wins.
pub fn apply_confusions(t: &Textogram, cfg: &TextogramConfig, set: &SymbolSet) -> Result<Textogram, TextogramError> {
    cfg.validate()?;
    let mut table = Vec::with_capacity(cfg.confusion_pairs.len());
    for c in &cfg.confusion_pairs {
        let from = set
            .lookup(&c.from)
            .ok_or_else(|| TextogramError::UnknownSymbol(c.from.clone()))?;
        let to = set
            .lookup(&c.to)
            .filter(|&i| i != set.blank_index())
            .ok_or_else(|| TextogramError::UnknownSymbol(c.to.clone()))?;
        table.push((from, to, c.prob));
    }
    let mut out = t.clone();
    if table.is_empty() {
        return Ok(out);
    }
    let mut rng = seeded(derive_seed(cfg.seed, &[0xC0F0]));
    for (k, &(start, len)) in t.blocks.iter().enumerate() {
        let sym = t.source_ids.ids()[k];
        for &(from, to, p) in &table {
            if from != sym {
                continue;
            }
            if rng.gen::<f64>() < p {
                for a in &mut out.active[start..start + len] {
                    // Masked frames stay masked.
                    if a.is_some() {
                        *a = Some(to);
                    }
                }
                break;
            }
        }
    }
    Ok(out)
}

/// Drops each active entry independently with probability `mask_prob`.
pub fn apply_mask(t: &Textogram, mask_prob: f64, seed: u64) -> Result<Textogram, TextogramError> {
    check_prob(mask_prob)?;
    let mut out = t.clone();
    if mask_prob == 0.0 {
        return Ok(out);
    }
    let mut rng = seeded(seed);
    for a in out.active.iter_mut().filter(|a| a.is_some()) {
        if rng.gen::<f64>() < mask_prob {
            *a = None;
        }
    }
    Ok(out)
}

/// One sampled pronunciation: `input` feeds the textogram, `target` is the
/// canonical (first) variant used as the transducer target.
#[derive(Clone, Debug, PartialEq)]
pub struct PronunciationDraw {
    pub input: LabelSequence,
    pub target: LabelSequence,
    pub variant: usize,
}

pub fn expand_pronunciations(
    variants: &[LabelSequence],
    weights: &[f64],
    seed: u64,
) -> Result<PronunciationDraw, TextogramError> {
    if variants.is_empty() || variants.len() != weights.len() {
        return Err(TextogramError::NoVariants);
    }
    for &w in weights {
        check_prob(w)?;
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(TextogramError::WeightSum(sum));
    }
    let u: f64 = seeded(seed).gen();
    let mut acc = 0.0;
    // Rounding can leave the cumulative sum just under 1; fall back to the
    // last variant with positive weight.
    let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if w > 0.0 && u < acc {
            pick = i;
            break;
        }
    }
    Ok(PronunciationDraw {
        input: variants[pick].clone(),
        target: variants[0].clone(),
        variant: pick,
    })
}
