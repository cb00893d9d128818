//! Transcription (encoder), prediction and joint networks with hand-written
//! reverse-mode gradients.
//!
//! * encoder: stacked (bi)directional LSTM layers over composed feature frames
//! * prediction: embedding lookup + one unidirectional LSTM over the label
//!   history, starting from the BLANK embedding
//! * joint: `W · tanh(A·h_enc ⊙ B·h_pred) + bias`

pub mod checkpoint;
mod lstm;

use std::collections::BTreeMap;

use rand::Rng as _;
use thiserror::Error;

use crate::featpipe::FeatureSequence;
use crate::linalg::{add_mat_vec, add_outer, add_vec_mat, Matrix};
use crate::rng::{fnv1a32, seeded};
use crate::symbols::LabelSequence;
use crate::transducer::{rnnt_loss, LogitLattice, TransducerError, TransducerModel};

pub use lstm::LstmState;
use lstm::{LstmGrads, LstmTrace, LstmWeights};

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature width {got} does not match input_dim {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("label id {0} outside vocabulary")]
    BadLabel(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Transducer(#[from] TransducerError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub enc_layers: usize,
    pub enc_cells: usize,
    pub bidirectional_encoder: bool,
    pub pred_cells: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 324,
            enc_layers: 2,
            enc_cells: 64,
            bidirectional_encoder: true,
            pred_cells: 64,
            joint_dim: 32,
            vocab_size: 42,
        }
    }
}

impl ModelConfig {
    /// Full-size telephony configuration.
    pub fn paper_scale() -> Self {
        Self {
            input_dim: 324,
            enc_layers: 6,
            enc_cells: 640,
            bidirectional_encoder: true,
            pred_cells: 1024,
            joint_dim: 256,
            vocab_size: 42,
        }
    }

    pub fn enc_out_dim(&self) -> usize {
        self.enc_cells * if self.bidirectional_encoder { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("enc_layers", self.enc_layers),
            ("enc_cells", self.enc_cells),
            ("pred_cells", self.pred_cells),
            ("joint_dim", self.joint_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(NetworkError::Config(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 2 {
            return Err(NetworkError::Config("vocab_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> u32 {
        let s = format!(
            "in={};layers={};cells={};bi={};pred={};joint={};vocab={}",
            self.input_dim,
            self.enc_layers,
            self.enc_cells,
            self.bidirectional_encoder,
            self.pred_cells,
            self.joint_dim,
            self.vocab_size
        );
        fnv1a32(s.as_bytes())
    }

    /// Tensor names and shapes, in canonical (sorted) order.
    pub fn tensor_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m = BTreeMap::new();
        let h = self.enc_cells;
        let dirs: &[&str] = if self.bidirectional_encoder {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        };
        for l in 0..self.enc_layers {
            let n_in = if l == 0 { self.input_dim } else { self.enc_out_dim() };
            for d in dirs {
                m.insert(format!("enc.{l}.{d}.w_ih"), vec![n_in, 4 * h]);
                m.insert(format!("enc.{l}.{d}.w_hh"), vec![h, 4 * h]);
                m.insert(format!("enc.{l}.{d}.b"), vec![4 * h]);
            }
        }
        let p = self.pred_cells;
        m.insert("pred.embed".into(), vec![self.vocab_size, p]);
        m.insert("pred.w_ih".into(), vec![p, 4 * p]);
        m.insert("pred.w_hh".into(), vec![p, 4 * p]);
        m.insert("pred.b".into(), vec![4 * p]);
        m.insert("joint.enc_proj".into(), vec![self.enc_out_dim(), self.joint_dim]);
        m.insert("joint.pred_proj".into(), vec![p, self.joint_dim]);
        m.insert("joint.out_w".into(), vec![self.vocab_size, self.joint_dim]);
        m.insert("joint.out_b".into(), vec![self.vocab_size]);
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Prediction,
    Joint,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("enc.") {
            ParamGroup::Encoder
        } else if name.starts_with("pred.") {
            ParamGroup::Prediction
        } else {
            ParamGroup::Joint
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Which tensors receive no gradient and no optimizer update.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FreezeMask(BTreeMap<String, bool>);

impl FreezeMask {
    pub fn is_frozen(&self, name: &str) -> bool {
        self.0.get(name).copied().unwrap_or(false)
    }

    pub fn set(&mut self, name: &str, frozen: bool) {
        if let Some(v) = self.0.get_mut(name) {
            *v = frozen;
        }
    }

    pub fn set_group(&mut self, group: ParamGroup, frozen: bool) {
        for (k, v) in self.0.iter_mut() {
            if ParamGroup::of(k) == group {
                *v = frozen;
            }
        }
    }

    pub fn with_group(mut self, group: ParamGroup, frozen: bool) -> Self {
        self.set_group(group, frozen);
        self
    }

    pub fn group_frozen(&self, group: ParamGroup) -> bool {
        let mut any = false;
        for (k, &v) in &self.0 {
            if ParamGroup::of(k) == group {
                any = true;
                if !v {
                    return false;
                }
            }
        }
        any
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Named parameter tensors plus their freeze mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    freeze_mask: FreezeMask,
}

impl ParamSet {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        let freeze_mask = FreezeMask(tensors.keys().map(|k| (k.clone(), false)).collect());
        Self { tensors, freeze_mask }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    fn data(&self, name: &str) -> &[f64] {
        &self.tensors[name].data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn freeze_mask(&self) -> &FreezeMask {
        &self.freeze_mask
    }

    pub fn freeze_mask_mut(&mut self) -> &mut FreezeMask {
        &mut self.freeze_mask
    }

    /// Tensors of one group, for bit-exact comparisons.
    pub fn group(&self, group: ParamGroup) -> BTreeMap<&str, &Tensor> {
        self.iter().filter(|(k, _)| ParamGroup::of(k) == group).collect()
    }
}

/// Gradient buffers keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Grads(
            params
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (k, v) in self.0.iter_mut() {
            if let Some(o) = other.0.get(k) {
                for (a, b) in v.iter_mut().zip(o) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.values_mut() {
            for a in v.iter_mut() {
                *a *= s;
            }
        }
    }

    pub fn zero_group(&mut self, group: ParamGroup) {
        for (k, v) in self.0.iter_mut() {
            if ParamGroup::of(k) == group {
                v.fill(0.0);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().flat_map(|v| v.iter()).all(|g| g.is_finite())
    }

    fn take(&mut self, name: &str) -> Vec<f64> {
        std::mem::take(self.0.get_mut(name).expect("gradient buffer exists"))
    }

    fn put(&mut self, name: &str, v: Vec<f64>) {
        *self.0.get_mut(name).expect("gradient buffer exists") = v;
    }
}

struct EncoderLayerTrace {
    input: Matrix,
    fwd: LstmTrace,
    bwd: Option<LstmTrace>,
}

struct EncoderTrace {
    layers: Vec<EncoderLayerTrace>,
    out: Matrix,
}

struct PredictionTrace {
    inputs: Matrix,
    trace: LstmTrace,
}

/// Per-utterance loss and gradients.
#[derive(Clone, Debug)]
pub struct UtteranceGrad {
    pub loss: f64,
    pub grads: Grads,
}

/// Prediction-network state during decoding: recurrent state plus the
/// projected output `B · h_pred` the joint consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    pub lstm: LstmState,
    pub projected: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model with every tensor drawn from seeded `U(−0.05, 0.05)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = seeded(seed);
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(shape);
                for v in &mut t.data {
                    *v = rng.gen_range(-INIT_RANGE..INIT_RANGE);
                }
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamSet::from_tensors(tensors),
        })
    }

    /// Wraps tensors, checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, NetworkError> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        for (name, shape) in &shapes {
            let t = params
                .get(name)
                .ok_or_else(|| NetworkError::MissingTensor(name.clone()))?;
            if &t.shape != shape || t.len() != shape.iter().product::<usize>() {
                return Err(NetworkError::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape
                )));
            }
        }
        if params.tensors.len() != shapes.len() {
            let extra: Vec<&str> = params.names().filter(|n| !shapes.contains_key(*n)).collect();
            return Err(NetworkError::Shape(format!("unexpected tensors {extra:?}")));
        }
        Ok(Self { config, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn lstm(&self, prefix: &str, hidden: usize) -> LstmWeights<'_> {
        LstmWeights {
            w_ih: self.params.data(&format!("{prefix}.w_ih")),
            w_hh: self.params.data(&format!("{prefix}.w_hh")),
            b: self.params.data(&format!("{prefix}.b")),
            hidden,
        }
    }

    fn check_input(&self, f: &FeatureSequence) -> Result<(), NetworkError> {
        if f.frames().cols() != self.config.input_dim {
            return Err(NetworkError::InputWidth {
                expected: self.config.input_dim,
                got: f.frames().cols(),
            });
        }
        Ok(())
    }

    fn encoder_trace(&self, f: &FeatureSequence) -> Result<EncoderTrace, NetworkError> {
        self.check_input(f)?;
        let h = self.config.enc_cells;
        let mut x = f.frames().clone();
        let mut layers = Vec::with_capacity(self.config.enc_layers);
        for l in 0..self.config.enc_layers {
            let fwd = self.lstm(&format!("enc.{l}.fwd"), h).run(&x, false);
            let bwd = self
                .config
                .bidirectional_encoder
                .then(|| self.lstm(&format!("enc.{l}.bwd"), h).run(&x, true));
            let mut out = Matrix::zeros(x.rows(), self.config.enc_out_dim());
            for t in 0..x.rows() {
                let row = out.row_mut(t);
                row[..h].copy_from_slice(fwd.h.row(t));
                if let Some(b) = &bwd {
                    row[h..].copy_from_slice(b.h.row(t));
                }
            }
            layers.push(EncoderLayerTrace {
                input: std::mem::replace(&mut x, out),
                fwd,
                bwd,
            });
        }
        Ok(EncoderTrace { layers, out: x })
    }

    /// `h_enc` for every frame, `[T × enc_out_dim]`.
    pub fn encoder_forward(&self, f: &FeatureSequence) -> Result<Matrix, NetworkError> {
        Ok(self.encoder_trace(f)?.out)
    }

    fn prediction_inputs(&self, y: &LabelSequence) -> Result<Matrix, NetworkError> {
        let p = self.config.pred_cells;
        let embed = self.params.data("pred.embed");
        let mut xs = Matrix::zeros(y.len() + 1, p);
        xs.row_mut(0).copy_from_slice(&embed[..p]);
        for (u, &id) in y.ids().iter().enumerate() {
            if id == 0 || id >= self.config.vocab_size {
                return Err(NetworkError::BadLabel(id));
            }
            xs.row_mut(u + 1).copy_from_slice(&embed[id * p..(id + 1) * p]);
        }
        Ok(xs)
    }

    fn prediction_trace(&self, y: &LabelSequence) -> Result<PredictionTrace, NetworkError> {
        let inputs = self.prediction_inputs(y)?;
        let trace = self.lstm("pred", self.config.pred_cells).run(&inputs, false);
        Ok(PredictionTrace { inputs, trace })
    }

    /// `h_pred` for the empty history and every prefix of `y`, `[(U+1) × pred_cells]`.
    pub fn prediction_forward(&self, y: &LabelSequence) -> Result<Matrix, NetworkError> {
        Ok(self.prediction_trace(y)?.trace.h)
    }

    fn project(&self, rows: &Matrix, name: &str) -> Matrix {
        let w = self.params.data(name);
        let j = self.config.joint_dim;
        let mut out = Matrix::zeros(rows.rows(), j);
        for t in 0..rows.rows() {
            add_vec_mat(out.row_mut(t), rows.row(t), w);
        }
        out
    }

    /// Joint output from already projected encoder and prediction rows.
    fn joint_projected(&self, ze: &[f64], zp: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        for ((s, &a), &b) in hidden.iter_mut().zip(ze).zip(zp) {
            *s = (a * b).tanh();
        }
        let w = self.params.data("joint.out_w");
        logits.copy_from_slice(self.params.data("joint.out_b"));
        add_mat_vec(logits, w, hidden);
    }

    /// Logits for one `(h_enc, h_pred)` pair.
    pub fn joint_forward(&self, h_enc: &[f64], h_pred: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let c = &self.config;
        if h_enc.len() != c.enc_out_dim() || h_pred.len() != c.pred_cells {
            return Err(NetworkError::Shape(format!(
                "joint expects ({}, {}) got ({}, {})",
                c.enc_out_dim(),
                c.pred_cells,
                h_enc.len(),
                h_pred.len()
            )));
        }
        let mut ze = vec![0.0; c.joint_dim];
        let mut zp = vec![0.0; c.joint_dim];
        add_vec_mat(&mut ze, h_enc, self.params.data("joint.enc_proj"));
        add_vec_mat(&mut zp, h_pred, self.params.data("joint.pred_proj"));
        let mut s = vec![0.0; c.joint_dim];
        let mut logits = vec![0.0; c.vocab_size];
        self.joint_projected(&ze, &zp, &mut s, &mut logits);
        Ok(logits)
    }

    fn lattice_from(&self, ze: &Matrix, zp: &Matrix, y: &LabelSequence) -> Result<LogitLattice, NetworkError> {
        let k = self.config.vocab_size;
        let mut logits = vec![0.0; ze.rows() * zp.rows() * k];
        let mut s = vec![0.0; self.config.joint_dim];
        for t in 0..ze.rows() {
            for u in 0..zp.rows() {
                let o = (t * zp.rows() + u) * k;
                self.joint_projected(ze.row(t), zp.row(u), &mut s, &mut logits[o..o + k]);
            }
        }
        Ok(LogitLattice::new(ze.rows(), k, logits, y.clone())?)
    }

    /// Full `[T × (U+1) × K]` logit lattice for an utterance.
    pub fn lattice(&self, f: &FeatureSequence, y: &LabelSequence) -> Result<LogitLattice, NetworkError> {
        let enc = self.encoder_forward(f)?;
        let pred = self.prediction_forward(y)?;
        let ze = self.project(&enc, "joint.enc_proj");
        let zp = self.project(&pred, "joint.pred_proj");
        self.lattice_from(&ze, &zp, y)
    }

    /// Transducer loss of one utterance and exact gradients for every
    /// tensor. Tensors frozen in `freeze` get exactly zero gradient, and a
    /// fully frozen sub-network is not back-propagated at all.
    pub fn backward(
        &self,
        f: &FeatureSequence,
        y: &LabelSequence,
        freeze: &FreezeMask,
    ) -> Result<UtteranceGrad, NetworkError> {
        let c = &self.config;
        let (k, jd) = (c.vocab_size, c.joint_dim);
        let enc = self.encoder_trace(f)?;
        let pred = self.prediction_trace(y)?;
        let ze = self.project(&enc.out, "joint.enc_proj");
        let zp = self.project(&pred.trace.h, "joint.pred_proj");
        let lattice = self.lattice_from(&ze, &zp, y)?;
        let result = rnnt_loss(&lattice)?;

        let mut grads = Grads::zeros_like(&self.params);
        let (t_len, u1) = (ze.rows(), zp.rows());
        let out_w = self.params.data("joint.out_w");
        let mut d_ze = Matrix::zeros(t_len, jd);
        let mut d_zp = Matrix::zeros(u1, jd);
        let mut d_w = grads.take("joint.out_w");
        let mut d_b = grads.take("joint.out_b");
        let mut s = vec![0.0; jd];
        let mut ds = vec![0.0; jd];
        let mut scratch = vec![0.0; k];
        for t in 0..t_len {
            for u in 0..u1 {
                let o = (t * u1 + u) * k;
                let g = &result.grad[o..o + k];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                self.joint_projected(ze.row(t), zp.row(u), &mut s, &mut scratch);
                for (db, &gv) in d_b.iter_mut().zip(g) {
                    *db += gv;
                }
                add_outer(&mut d_w, g, &s);
                ds.fill(0.0);
                add_vec_mat(&mut ds, g, out_w);
                let (ze_t, zp_u) = (ze.row(t), zp.row(u));
                let dze = d_ze.row_mut(t);
                for j in 0..jd {
                    let dpre = ds[j] * (1.0 - s[j] * s[j]);
                    dze[j] += dpre * zp_u[j];
                }
                let dzp = d_zp.row_mut(u);
                for j in 0..jd {
                    let dpre = ds[j] * (1.0 - s[j] * s[j]);
                    dzp[j] += dpre * ze_t[j];
                }
            }
        }
        grads.put("joint.out_w", d_w);
        grads.put("joint.out_b", d_b);

        // Projections and the gradients flowing into each sub-network.
        let enc_frozen = freeze.group_frozen(ParamGroup::Encoder);
        let pred_frozen = freeze.group_frozen(ParamGroup::Prediction);
        let mut d_enc = Matrix::zeros(t_len, c.enc_out_dim());
        {
            let a = self.params.data("joint.enc_proj");
            let d_a = grads.get_mut("joint.enc_proj").expect("exists");
            for t in 0..t_len {
                add_outer(d_a, enc.out.row(t), d_ze.row(t));
                if !enc_frozen {
                    add_mat_vec(d_enc.row_mut(t), a, d_ze.row(t));
                }
            }
        }
        let mut d_pred = Matrix::zeros(u1, c.pred_cells);
        {
            let b = self.params.data("joint.pred_proj");
            let d_bp = grads.get_mut("joint.pred_proj").expect("exists");
            for u in 0..u1 {
                add_outer(d_bp, pred.trace.h.row(u), d_zp.row(u));
                if !pred_frozen {
                    add_mat_vec(d_pred.row_mut(u), b, d_zp.row(u));
                }
            }
        }

        if !pred_frozen {
            let p = c.pred_cells;
            let w = self.lstm("pred", p);
            let mut d_in = Matrix::zeros(u1, p);
            let (mut gw_ih, mut gw_hh, mut gb) =
                (grads.take("pred.w_ih"), grads.take("pred.w_hh"), grads.take("pred.b"));
            w.backprop(
                &pred.inputs,
                &pred.trace,
                &d_pred,
                &mut LstmGrads {
                    w_ih: &mut gw_ih,
                    w_hh: &mut gw_hh,
                    b: &mut gb,
                },
                Some(&mut d_in),
            );
            grads.put("pred.w_ih", gw_ih);
            grads.put("pred.w_hh", gw_hh);
            grads.put("pred.b", gb);
            let d_emb = grads.get_mut("pred.embed").expect("exists");
            let ids = std::iter::once(0).chain(y.ids().iter().copied());
            for (u, id) in ids.enumerate() {
                for (e, &d) in d_emb[id * p..(id + 1) * p].iter_mut().zip(d_in.row(u)) {
                    *e += d;
                }
            }
        }

        if !enc_frozen {
            let h = c.enc_cells;
            let mut upstream = d_enc;
            for l in (0..c.enc_layers).rev() {
                let layer = &enc.layers[l];
                let mut d_x = (l > 0).then(|| Matrix::zeros(t_len, layer.input.cols()));
                let dirs: &[(&str, Option<&LstmTrace>, usize)] =
                    &[("fwd", Some(&layer.fwd), 0), ("bwd", layer.bwd.as_ref(), h)];
                for &(dir, trace, offset) in dirs {
                    let Some(trace) = trace else { continue };
                    let prefix = format!("enc.{l}.{dir}");
                    let dh = upstream.columns(offset, offset + h);
                    let names = [
                        format!("{prefix}.w_ih"),
                        format!("{prefix}.w_hh"),
                        format!("{prefix}.b"),
                    ];
                    let (mut gw_ih, mut gw_hh, mut gb) =
                        (grads.take(&names[0]), grads.take(&names[1]), grads.take(&names[2]));
                    self.lstm(&prefix, h).backprop(
                        &layer.input,
                        trace,
                        &dh,
                        &mut LstmGrads {
                            w_ih: &mut gw_ih,
                            w_hh: &mut gw_hh,
                            b: &mut gb,
                        },
                        d_x.as_mut(),
                    );
                    grads.put(&names[0], gw_ih);
                    grads.put(&names[1], gw_hh);
                    grads.put(&names[2], gb);
                }
                if let Some(d_x) = d_x {
                    upstream = d_x;
                }
            }
        }

        for (name, g) in grads.iter_mut() {
            if freeze.is_frozen(name) {
                g.fill(0.0);
            }
        }
        Ok(UtteranceGrad {
            loss: result.loss,
            grads,
        })
    }

    /// Appends `n_new` output symbols: new rows in the prediction embedding
    /// table and the output projection (plus bias entries), drawn from seeded
    /// `U(−0.05, 0.05)`. Existing values are copied bit-for-bit.
    pub fn extend_vocabulary(&self, n_new: usize, seed: u64) -> Result<Model, NetworkError> {
        if n_new == 0 {
            return Ok(self.clone());
        }
        let mut rng = seeded(seed);
        let mut params = self.params.clone();
        for name in ["pred.embed", "joint.out_w", "joint.out_b"] {
            let t = params.get_mut(name).expect("tensor exists");
            let row = if t.shape.len() == 2 { t.shape[1] } else { 1 };
            t.shape[0] += n_new;
            for _ in 0..n_new * row {
                t.data.push(rng.gen_range(-INIT_RANGE..INIT_RANGE));
            }
        }
        let config = ModelConfig {
            vocab_size: self.config.vocab_size + n_new,
            ..self.config.clone()
        };
        let mut model = Model::from_params(config, params)?;
        model.params.freeze_mask = self.params.freeze_mask.clone();
        Ok(model)
    }

    pub fn predictor_state(&self, lstm: LstmState) -> PredictorState {
        let mut projected = vec![0.0; self.config.joint_dim];
        add_vec_mat(&mut projected, &lstm.h, self.params.data("joint.pred_proj"));
        PredictorState { lstm, projected }
    }

    fn embed_row(&self, id: usize) -> &[f64] {
        let p = self.config.pred_cells;
        &self.params.data("pred.embed")[id * p..(id + 1) * p]
    }
}

impl TransducerModel for Model {
    type State = PredictorState;

    fn encode(&self, features: &FeatureSequence) -> Result<Matrix, TransducerError> {
        let enc = self
            .encoder_forward(features)
            .map_err(|e| TransducerError::Model(e.to_string()))?;
        Ok(self.project(&enc, "joint.enc_proj"))
    }

    fn initial_state(&self) -> PredictorState {
        let p = self.config.pred_cells;
        let (_, s) = self.lstm("pred", p).step(self.embed_row(0), &LstmState::zeros(p));
        self.predictor_state(s)
    }

    fn advance(&self, state: &PredictorState, symbol: usize) -> PredictorState {
        let p = self.config.pred_cells;
        let (_, s) = self.lstm("pred", p).step(self.embed_row(symbol), &state.lstm);
        self.predictor_state(s)
    }

    fn joint(&self, encoded: &[f64], state: &PredictorState) -> Vec<f64> {
        let mut s = vec![0.0; self.config.joint_dim];
        let mut logits = vec![0.0; self.config.vocab_size];
        self.joint_projected(encoded, &state.projected, &mut s, &mut logits);
        logits
    }
}
