//! Multimodal feature construction.
//!
//! Speech: normalized base frames (optionally augmented) → Δ/ΔΔ → pairwise
//! stacking with frame skipping. Text: textogram → the same pairwise stacking.
//! Both then land in one `D_speech + D_text` wide vector per frame with the
//! other modality's columns held at exactly 0.0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::seeded;
use crate::textogram::Textogram;

pub const FEATURE_MAGIC: &[u8; 8] = b"FEATv1\0\0";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected {expected} columns, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("variance for dimension {0} is not positive")]
    NonPositiveVariance(usize),
    #[error("normalization statistics need at least one frame")]
    NoFrames,
    #[error("donor utterance is empty")]
    EmptyDonor,
    #[error("{0}")]
    Invariant(String),
    #[error("bad feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
        })
    }
}

/// Column layout of the composed vectors: speech block first, then text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalityDims {
    pub speech: usize,
    pub text: usize,
}

impl ModalityDims {
    pub fn total(&self) -> usize {
        self.speech + self.text
    }
}

/// Modality-tagged `[T × (D_speech + D_text)]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Matrix,
    modality: Modality,
    dims: ModalityDims,
}

impl FeatureSequence {
    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dims(&self) -> ModalityDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Checks the zero-fill invariant of the inactive modality.
    pub fn check(&self) -> Result<(), FeatureError> {
        if self.frames.cols() != self.dims.total() {
            return Err(FeatureError::DimMismatch {
                expected: self.dims.total(),
                got: self.frames.cols(),
            });
        }
        let (lo, hi) = match self.modality {
            Modality::Speech => (self.dims.speech, self.dims.total()),
            Modality::Text => (0, self.dims.speech),
        };
        for (t, row) in self.frames.iter_rows().enumerate() {
            if row[lo..hi].iter().any(|&v| v.to_bits() != 0) {
                return Err(FeatureError::Invariant(format!(
                    "{} frame {t} has non-zero entries in the inactive block",
                    self.modality
                )));
            }
        }
        Ok(())
    }

    /// Appends zero frames (as used by padded batches).
    pub fn padded(&self, extra: usize) -> FeatureSequence {
        let mut data = self.frames.as_slice().to_vec();
        data.resize(data.len() + extra * self.dims.total(), 0.0);
        FeatureSequence {
            frames: Matrix::from_vec(self.len() + extra, self.dims.total(), data),
            modality: self.modality,
            dims: self.dims,
        }
    }

    /// The first `n` frames.
    pub fn truncated(&self, n: usize) -> FeatureSequence {
        FeatureSequence {
            frames: self.frames.head(n),
            modality: self.modality,
            dims: self.dims,
        }
    }
}

/// Per-dimension global mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Pooled statistics over every frame of `utterances`. Variances are
    /// floored at 1e-10 so constant dimensions stay usable.
    pub fn compute<'a>(utterances: impl IntoIterator<Item = &'a Matrix>) -> Result<Self, FeatureError> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut mats = Vec::new();
        for m in utterances {
            if sum.is_empty() {
                sum = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            if m.cols() != sum.len() {
                return Err(FeatureError::DimMismatch {
                    expected: sum.len(),
                    got: m.cols(),
                });
            }
            for row in m.iter_rows() {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            n += m.rows();
            mats.push(m);
        }
        if n == 0 {
            return Err(FeatureError::NoFrames);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        // Two-pass variance for accuracy.
        for m in mats {
            for row in m.iter_rows() {
                for ((q, &v), &mu) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (v - mu) * (v - mu);
                }
            }
        }
        let var = sq.iter().map(|q| (q / n as f64).max(1e-10)).collect();
        Ok(Self { mean, var })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePipelineConfig {
    pub base_dim: usize,
    pub stack_pairs: bool,
    pub mask_blocks_time: usize,
    pub mask_blocks_freq: usize,
    pub max_mask_time: usize,
    pub max_mask_freq: usize,
    pub noise_inject_prob: f64,
    pub noise_scale: f64,
    pub norm_stats: Option<NormStats>,
}

impl Default for FeaturePipelineConfig {
    fn default() -> Self {
        Self {
            base_dim: 40,
            stack_pairs: true,
            mask_blocks_time: 2,
            mask_blocks_freq: 2,
            max_mask_time: 30,
            max_mask_freq: 8,
            noise_inject_prob: 0.8,
            noise_scale: 0.4,
            norm_stats: None,
        }
    }
}

impl FeaturePipelineConfig {
    pub fn speech_dim(&self) -> usize {
        self.base_dim * 3 * if self.stack_pairs { 2 } else { 1 }
    }

    pub fn text_dim(&self, textogram_symbols: usize) -> usize {
        textogram_symbols * if self.stack_pairs { 2 } else { 1 }
    }

    pub fn dims(&self, textogram_symbols: usize) -> ModalityDims {
        ModalityDims {
            speech: self.speech_dim(),
            text: self.text_dim(textogram_symbols),
        }
    }
}

/// Base frames plus per-utterance augmentation inputs.
pub struct SpeechAugment<'a> {
    pub donor: Option<&'a Matrix>,
    pub seed: u64,
}

/// Stateless feature pipeline bound to a config and a textogram inventory size.
#[derive(Clone, Debug)]
pub struct FeaturePipeline {
    pub config: FeaturePipelineConfig,
    pub dims: ModalityDims,
}

impl FeaturePipeline {
    pub fn new(config: FeaturePipelineConfig, textogram_symbols: usize) -> Self {
        let dims = config.dims(textogram_symbols);
        Self { config, dims }
    }

    /// Normalizes `base` with the configured statistics (identity when none).
    pub fn normalized(&self, base: &Matrix) -> Result<Matrix, FeatureError> {
        if base.cols() != self.config.base_dim {
            return Err(FeatureError::DimMismatch {
                expected: self.config.base_dim,
                got: base.cols(),
            });
        }
        match &self.config.norm_stats {
            Some(s) => normalize(base, s),
            None => Ok(base.clone()),
        }
    }

    /// Speech-side features. `augment` enables sequence noise injection and
    /// block masking; evaluation passes `None`. A donor, when given, must
    /// already be normalized.
    pub fn speech(&self, base: &Matrix, augment: Option<SpeechAugment<'_>>) -> Result<FeatureSequence, FeatureError> {
        let mut f = self.normalized(base)?;
        if let Some(aug) = augment {
            let c = &self.config;
            if let Some(donor) = aug.donor {
                f = inject_sequence_noise(&f, donor, c.noise_inject_prob, c.noise_scale, aug.seed)?;
            }
            f = mask_spectrum_blocks(
                &f,
                c.mask_blocks_time,
                c.mask_blocks_freq,
                c.max_mask_time,
                c.max_mask_freq,
                aug.seed ^ 0x5A5A_5A5A,
            );
        }
        let f = add_deltas(&f);
        let f = if self.config.stack_pairs {
            stack_downsample(&f)
        } else {
            f
        };
        compose_multimodal(&f, Modality::Speech, self.dims)
    }

    pub fn text(&self, t: &Textogram) -> Result<FeatureSequence, FeatureError> {
        let m = t.to_matrix();
        let m = if self.config.stack_pairs && m.rows() > 0 {
            stack_downsample(&m)
        } else {
            m
        };
        let m = if m.rows() == 0 {
            Matrix::zeros(0, self.dims.text)
        } else {
            m
        };
        compose_multimodal(&m, Modality::Text, self.dims)
    }

    /// Output frame count for a speech utterance of `base_frames` frames.
    pub fn speech_frames(&self, base_frames: usize) -> usize {
        if self.config.stack_pairs {
            base_frames.div_ceil(2)
        } else {
            base_frames
        }
    }

    pub fn text_frames(&self, textogram_frames: usize) -> usize {
        self.speech_frames(textogram_frames)
    }
}

/// Appends Δ and ΔΔ columns using a ±2 regression window with edge
/// replication.
pub fn add_deltas(base: &Matrix) -> Matrix {
    let d = base.cols();
    let t_len = base.rows();
    let delta = regression_delta(base);
    let delta2 = regression_delta(&delta);
    let mut out = Matrix::zeros(t_len, 3 * d);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row[..d].copy_from_slice(base.row(t));
        row[d..2 * d].copy_from_slice(delta.row(t));
        row[2 * d..].copy_from_slice(delta2.row(t));
    }
    out
}

fn regression_delta(m: &Matrix) -> Matrix {
    const WINDOW: usize = 2;
    // Σ_{n=1..N} n² · 2
    let denom = 2.0 * (1..=WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let t_len = m.rows();
    let mut out = Matrix::zeros(t_len, m.cols());
    if t_len == 0 {
        return out;
    }
    let clamp = |i: isize| i.clamp(0, t_len as isize - 1) as usize;
    for t in 0..t_len {
        let row = out.row_mut(t);
        for n in 1..=WINDOW {
            let fwd = m.row(clamp(t as isize + n as isize));
            let bwd = m.row(clamp(t as isize - n as isize));
            for ((o, &a), &b) in row.iter_mut().zip(fwd).zip(bwd) {
                *o += n as f64 * (a - b);
            }
        }
        for o in row.iter_mut() {
            *o /= denom;
        }
    }
    out
}

/// Concatenates frames `2i` and `2i+1`; odd lengths repeat the last frame.
pub fn stack_downsample(f: &Matrix) -> Matrix {
    let d = f.cols();
    let t_out = f.rows().div_ceil(2);
    let mut out = Matrix::zeros(t_out, 2 * d);
    for i in 0..t_out {
        let a = 2 * i;
        let b = (2 * i + 1).min(f.rows() - 1);
        let row = out.row_mut(i);
        row[..d].copy_from_slice(f.row(a));
        row[d..].copy_from_slice(f.row(b));
    }
    out
}

pub fn normalize(f: &Matrix, stats: &NormStats) -> Result<Matrix, FeatureError> {
    if stats.mean.len() != f.cols() || stats.var.len() != f.cols() {
        return Err(FeatureError::DimMismatch {
            expected: f.cols(),
            got: stats.mean.len(),
        });
    }
    if let Some(j) = stats.var.iter().position(|&v| v <= 0.0 || v.is_nan()) {
        return Err(FeatureError::NonPositiveVariance(j));
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut out = f.clone();
    for t in 0..out.rows() {
        for ((x, &mu), &s) in out.row_mut(t).iter_mut().zip(&stats.mean).zip(&inv_std) {
            *x = (*x - mu) * s;
        }
    }
    Ok(out)
}

/// With probability `prob` adds `scale · donor[t mod T_donor]` to every frame.
pub fn inject_sequence_noise(
    f: &Matrix,
    donor: &Matrix,
    prob: f64,
    scale: f64,
    seed: u64,
) -> Result<Matrix, FeatureError> {
    if donor.rows() == 0 {
        return Err(FeatureError::EmptyDonor);
    }
    if donor.cols() != f.cols() {
        return Err(FeatureError::DimMismatch {
            expected: f.cols(),
            got: donor.cols(),
        });
    }
    let mut out = f.clone();
    if prob <= 0.0 || seeded(seed).gen::<f64>() >= prob {
        return Ok(out);
    }
    for t in 0..out.rows() {
        let d = donor.row(t % donor.rows());
        for (x, &v) in out.row_mut(t).iter_mut().zip(d) {
            *x += scale * v;
        }
    }
    Ok(out)
}

/// Zeros up to `n_time` random time blocks (width ≤ `max_t`) and up to
/// `n_freq` random frequency blocks (width ≤ `max_f`).
pub fn mask_spectrum_blocks(f: &Matrix, n_time: usize, n_freq: usize, max_t: usize, max_f: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    let mut draw_blocks = |n: usize, max_w: usize, extent: usize| -> Vec<(usize, usize)> {
        let count = rng.gen_range(0..=n);
        (0..count)
            .map(|_| {
                let w = rng.gen_range(0..=max_w.min(extent));
                let start = rng.gen_range(0..=extent - w);
                (start, w)
            })
            .collect()
    };
    let time = draw_blocks(n_time, max_t, f.rows());
    let freq = draw_blocks(n_freq, max_f, f.cols());
    mask_blocks(f, &time, &freq)
}

/// Zeros the given `(start, width)` time and frequency spans.
pub fn mask_blocks(f: &Matrix, time: &[(usize, usize)], freq: &[(usize, usize)]) -> Matrix {
    let mut out = f.clone();
    for &(start, w) in time {
        for t in start..(start + w).min(out.rows()) {
            out.row_mut(t).fill(0.0);
        }
    }
    for &(start, w) in freq {
        let end = (start + w).min(out.cols());
        for t in 0..out.rows() {
            out.row_mut(t)[start.min(end)..end].fill(0.0);
        }
    }
    out
}

/// Places a single-modality matrix into the joint layout, zero-filling the
/// other modality's block.
pub fn compose_multimodal(m: &Matrix, modality: Modality, dims: ModalityDims) -> Result<FeatureSequence, FeatureError> {
    let (width, offset) = match modality {
        Modality::Speech => (dims.speech, 0),
        Modality::Text => (dims.text, dims.speech),
    };
    if m.cols() != width {
        return Err(FeatureError::DimMismatch {
            expected: width,
            got: m.cols(),
        });
    }
    let mut frames = Matrix::zeros(m.rows(), dims.total());
    for t in 0..m.rows() {
        frames.row_mut(t)[offset..offset + width].copy_from_slice(m.row(t));
    }
    let seq = FeatureSequence { frames, modality, dims };
    seq.check()?;
    Ok(seq)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_features(m))?;
    w.flush()?;
    Ok(())
}

pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * m.as_slice().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn read_features(path: &Path) -> Result<Matrix, FeatureError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix, FeatureError> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(FeatureError::Format("missing FEATv1 magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(FeatureError::Format(format!(
            "expected {} payload bytes, found {}",
            rows * cols * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::{default_symbol_set, tokenize, UnknownPolicy};
    use crate::textogram::{build_textogram, TextogramConfig};
    use proptest::prelude::*;

    fn ramp(t_len: usize, d: usize, slope: f64) -> Matrix {
        let mut m = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            for j in 0..d {
                m.set(t, j, slope * t as f64 + j as f64);
            }
        }
        m
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let m = Matrix::from_vec(7, 3, vec![2.5; 21]);
        let out = add_deltas(&m);
        assert_eq!(out.cols(), 9);
        for row in out.iter_rows() {
            assert!(row[3..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn delta_width() {
        assert_eq!(add_deltas(&Matrix::zeros(5, 40)).cols(), 120);
    }

    #[test]
    fn delta_of_ramp_equals_slope_in_interior() {
        // Closed form: Σ n·(s(t+n) − s(t−n)) / (2Σn²) = s for a linear signal.
        let m = ramp(12, 2, 0.75);
        let out = add_deltas(&m);
        for t in 2..10 {
            assert!((out.get(t, 2) - 0.75).abs() < 1e-12);
            assert!((out.get(t, 3) - 0.75).abs() < 1e-12);
        }
        // Edge replication shrinks the estimate at the boundaries.
        assert!(out.get(0, 2) < 0.75);
    }

    #[test]
    fn stacking_shapes() {
        let m = ramp(10, 120, 1.0);
        let s = stack_downsample(&m);
        assert_eq!((s.rows(), s.cols()), (5, 240));
        assert_eq!(&s.row(2)[..120], m.row(4));
        assert_eq!(&s.row(2)[120..], m.row(5));
        let one = stack_downsample(&ramp(1, 3, 1.0));
        assert_eq!(one.row(0), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        assert_eq!(stack_downsample(&Matrix::zeros(4, 42)).cols(), 84);
        assert_eq!(stack_downsample(&ramp(7, 2, 1.0)).rows(), 4);
    }

    #[test]
    fn normalize_cases() {
        let m = ramp(6, 3, 1.0);
        assert_eq!(normalize(&m, &NormStats::identity(3)).unwrap(), m);
        let c = Matrix::from_vec(4, 1, vec![3.0; 4]);
        let s = NormStats {
            mean: vec![3.0],
            var: vec![2.0],
        };
        assert!(normalize(&c, &s).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let bad = NormStats {
            mean: vec![0.0],
            var: vec![0.0],
        };
        assert!(matches!(normalize(&c, &bad), Err(FeatureError::NonPositiveVariance(0))));
    }

    #[test]
    fn normalized_split_is_standardized() {
        let mut rng = seeded(9);
        let utts: Vec<Matrix> = (0..20)
            .map(|i| {
                let n = 5 + i;
                let data = (0..n * 4)
                    .map(|k| rng.gen::<f64>() * (1 + k % 4) as f64 + 3.0)
                    .collect();
                Matrix::from_vec(n, 4, data)
            })
            .collect();
        let stats = NormStats::compute(&utts).unwrap();
        let normed: Vec<Matrix> = utts.iter().map(|m| normalize(m, &stats).unwrap()).collect();
        let check = NormStats::compute(&normed).unwrap();
        for j in 0..4 {
            assert!(check.mean[j].abs() < 1e-6);
            assert!((check.var[j] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn noise_injection() {
        let f = ramp(5, 3, 0.5);
        assert_eq!(inject_sequence_noise(&f, &f, 0.0, 0.4, 1).unwrap(), f);
        assert_eq!(inject_sequence_noise(&f, &f, 1.0, 0.0, 1).unwrap(), f);
        let out = inject_sequence_noise(&f, &f, 1.0, 0.4, 1).unwrap();
        for (a, b) in out.as_slice().iter().zip(f.as_slice()) {
            assert!((a - 1.4 * b).abs() < 1e-12);
        }
        let short = ramp(2, 3, 1.0);
        let out = inject_sequence_noise(&f, &short, 1.0, 1.0, 1).unwrap();
        assert_eq!(out.get(3, 0), f.get(3, 0) + short.get(1, 0));
        assert!(inject_sequence_noise(&f, &Matrix::zeros(0, 3), 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn spectrum_masking() {
        let f = ramp(20, 6, 1.0).map(|v| v + 1.0);
        assert_eq!(mask_spectrum_blocks(&f, 0, 0, 5, 2, 3), f);
        let all = mask_blocks(&f, &[(0, 20)], &[]);
        assert_eq!(all.count_nonzero(), 0);
        assert_eq!(
            mask_spectrum_blocks(&f, 3, 2, 4, 2, 17),
            mask_spectrum_blocks(&f, 3, 2, 4, 2, 17)
        );
    }

    proptest! {
        #[test]
        fn masked_area_is_bounded(seed in any::<u64>(), n_t in 0usize..4, n_f in 0usize..4) {
            let (t_len, d) = (30usize, 10usize);
            let (max_t, max_f) = (5usize, 3usize);
            let f = Matrix::from_vec(t_len, d, vec![1.0; t_len * d]);
            let out = mask_spectrum_blocks(&f, n_t, n_f, max_t, max_f, seed);
            let zeroed = (t_len * d - out.count_nonzero()) as f64 / (t_len * d) as f64;
            let bound = (n_t * max_t * d + n_f * max_f * t_len) as f64 / (t_len * d) as f64;
            prop_assert!(zeroed <= bound + 1e-12);
        }

        #[test]
        fn feature_file_round_trip(rows in 0usize..6, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.gen::<f32>())).collect();
            let m = Matrix::from_vec(rows, cols, data);
            prop_assert_eq!(decode_features(&encode_features(&m)).unwrap(), m);
        }
    }

    #[test]
    fn feature_file_errors() {
        assert!(decode_features(b"nope").is_err());
        let mut bytes = encode_features(&Matrix::zeros(2, 2));
        bytes.pop();
        assert!(decode_features(&bytes).is_err());
    }

    #[test]
    fn composition_dims() {
        let dims = FeaturePipelineConfig::default().dims(42);
        assert_eq!((dims.speech, dims.text, dims.total()), (240, 84, 324));
        let s = compose_multimodal(&Matrix::from_vec(3, 240, vec![1.0; 720]), Modality::Speech, dims).unwrap();
        assert_eq!(s.frames().cols(), 324);
        assert!(s.frames().iter_rows().all(|r| r[240..].iter().all(|&v| v == 0.0)));
        let t = compose_multimodal(&Matrix::from_vec(3, 84, vec![1.0; 252]), Modality::Text, dims).unwrap();
        assert!(t.frames().iter_rows().all(|r| r[..240].iter().all(|&v| v == 0.0)));
        let e = compose_multimodal(&Matrix::zeros(0, 240), Modality::Speech, dims).unwrap();
        assert_eq!((e.len(), e.frames().cols()), (0, 324));
        assert!(matches!(
            compose_multimodal(&Matrix::zeros(1, 84), Modality::Speech, dims),
            Err(FeatureError::DimMismatch { .. })
        ));
    }

    #[test]
    fn supports_are_disjoint_and_cover() {
        let pipe = FeaturePipeline::new(FeaturePipelineConfig::default(), 42);
        let base = ramp(9, 40, 0.1).map(|v| v + 1.0);
        let sp = pipe.speech(&base, None).unwrap();
        let set = default_symbol_set();
        let ids = tokenize("ideas", &set, UnknownPolicy::Strict).unwrap();
        let tg = build_textogram(&ids, &TextogramConfig::default(), &set).unwrap();
        let tx = pipe.text(&tg).unwrap();
        assert_eq!(sp.len(), 5);
        assert_eq!(tx.len(), 10);
        let support = |f: &FeatureSequence| -> Vec<bool> {
            (0..324).map(|j| f.frames().iter_rows().any(|r| r[j] != 0.0)).collect()
        };
        let (a, b) = (support(&sp), support(&tx));
        for j in 0..324 {
            assert!(!(a[j] && b[j]));
            assert!(!a[j] || j < 240);
            assert!(!b[j] || j >= 240);
        }
        assert!(a[..240].iter().all(|&x| x));
        assert_eq!(sp.dims().total(), 324);
    }

    #[test]
    fn augmentation_is_seeded_and_off_by_default() {
        let pipe = FeaturePipeline::new(FeaturePipelineConfig::default(), 42);
        let base = ramp(40, 40, 0.1).map(|v| v.sin() + 1.0);
        let donor = ramp(11, 40, 0.3);
        let plain = pipe.speech(&base, None).unwrap();
        let a1 = pipe
            .speech(
                &base,
                Some(SpeechAugment {
                    donor: Some(&donor),
                    seed: 5,
                }),
            )
            .unwrap();
        let a2 = pipe
            .speech(
                &base,
                Some(SpeechAugment {
                    donor: Some(&donor),
                    seed: 5,
                }),
            )
            .unwrap();
        assert_eq!(a1, a2);
        assert_eq!(plain, pipe.speech(&base, None).unwrap());
    }
}
