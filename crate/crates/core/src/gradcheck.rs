//! Numerical self-checks: the forward-backward loss against path
//! enumeration, and analytic gradients against central differences.

use rand_distr::{Distribution, StandardNormal};

use crate::featpipe::{compose_multimodal, FeatureSequence, Modality, ModalityDims};
use crate::linalg::Matrix;
use crate::network::{Model, ModelConfig, NetworkError};
use crate::rng::{derive_seed, seeded};
use crate::symbols::LabelSequence;
use crate::transducer::{
    brute_force_loss, grad_check, relative_error_floor, rnnt_loss, LogitLattice, TransducerError, PARAM_GRAD_FLOOR,
};

/// Denominator floor for logit-level checks. With `LOGIT_EPS` the central
/// difference is accurate to roughly 1e-10 absolute, so smaller gradients
/// are compared on that scale.
pub const LOGIT_GRAD_FLOOR: f64 = 1e-6;
pub const LOGIT_EPS: f64 = 1e-5;
/// Base step for parameter checks; the extrapolated difference also
/// evaluates at half this step.
pub const PARAM_EPS: f64 = 1e-2;
pub const LOSS_TOLERANCE: f64 = 1e-9;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub max_t: usize,
    pub max_u: usize,
    pub max_k: usize,
    /// Seeds for the end-to-end parameter checks.
    pub model_seeds: usize,
    /// Deliberately corrupts the analytic gradients; the check must fail.
    pub perturb: bool,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            max_t: 4,
            max_u: 3,
            max_k: 5,
            model_seeds: 2,
            perturb: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub lattice_cases: usize,
    pub max_loss_err: f64,
    pub max_logit_rel_err: f64,
    pub param_cases: usize,
    pub max_param_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_loss_err <= LOSS_TOLERANCE
            && self.max_logit_rel_err <= GRAD_TOLERANCE
            && self.max_param_rel_err <= GRAD_TOLERANCE
    }
}

/// Standard-normal logits with targets cycling through the non-blank symbols.
pub fn random_lattice(t: usize, u: usize, k: usize, seed: u64) -> Result<LogitLattice, TransducerError> {
    let mut rng = seeded(seed);
    let logits = (0..t * (u + 1) * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let targets = (0..u).map(|i| 1 + (i * 7 + seed as usize) % (k - 1)).collect();
    LogitLattice::new(t, k, logits, LabelSequence::from_ids_unchecked(targets))
}

fn perturbation(g: f64) -> f64 {
    1e-3 * (1.0 + g.abs())
}

/// Worst floored relative error of logit gradients on one lattice.
pub fn logit_check(l: &LogitLattice, perturb: bool) -> Result<f64, TransducerError> {
    let mut c = grad_check(l, LOGIT_EPS)?;
    if perturb {
        c.analytic[0] += perturbation(c.analytic[0]);
    }
    Ok(c.analytic
        .iter()
        .zip(&c.numeric)
        .map(|(&a, &n)| relative_error_floor(a, n, LOGIT_GRAD_FLOOR))
        .fold(0.0, f64::max))
}

/// Model used for the end-to-end checks: T=3, U=2, K=3, with a wider
/// init so every tensor sees sizable gradients.
pub fn tiny_model(seed: u64) -> Result<Model, NetworkError> {
    let cfg = ModelConfig {
        input_dim: 6,
        enc_layers: 2,
        enc_cells: 4,
        bidirectional_encoder: true,
        pred_cells: 4,
        joint_dim: 5,
        vocab_size: 3,
    };
    let mut m = Model::new(cfg, seed)?;
    for (_, t) in m.params.iter_mut() {
        t.data.iter_mut().for_each(|v| *v *= 10.0);
    }
    Ok(m)
}

pub const TINY_DIMS: ModalityDims = ModalityDims { speech: 4, text: 2 };

/// Speech and text inputs of three frames for [`tiny_model`].
pub fn tiny_inputs(seed: u64) -> Vec<FeatureSequence> {
    let mut rng = seeded(seed);
    let speech: Vec<f64> = (0..3 * TINY_DIMS.speech)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut text = Matrix::zeros(3, TINY_DIMS.text);
    for i in 0..3 {
        text.set(i, i % 2, 1.0);
    }
    vec![
        compose_multimodal(
            &Matrix::from_vec(3, TINY_DIMS.speech, speech),
            Modality::Speech,
            TINY_DIMS,
        )
        .expect("speech width"),
        compose_multimodal(&text, Modality::Text, TINY_DIMS).expect("text width"),
    ]
}

fn loss_of(m: &Model, f: &FeatureSequence, y: &LabelSequence) -> Result<f64, NetworkError> {
    Ok(rnnt_loss(&m.lattice(f, y)?)?.loss)
}

/// Worst floored relative error between [`Model::backward`] and central
/// differences over every parameter.
pub fn param_check(m: &Model, f: &FeatureSequence, y: &LabelSequence, perturb: bool) -> Result<f64, NetworkError> {
    let analytic = m.backward(f, y, m.params.freeze_mask())?;
    let mut worst = 0.0f64;
    let names: Vec<String> = m.params.names().map(String::from).collect();
    let mut probe = m.clone();
    for (j, name) in names.iter().enumerate() {
        let g = analytic.grads.get(name).expect("gradient per tensor");
        for (i, &a) in g.iter().enumerate() {
            let orig = probe.params.get(name).expect("tensor").data[i];
            let mut central = |eps: f64| -> Result<f64, NetworkError> {
                probe.params.get_mut(name).expect("tensor").data[i] = orig + eps;
                let plus = loss_of(&probe, f, y)?;
                probe.params.get_mut(name).expect("tensor").data[i] = orig - eps;
                let minus = loss_of(&probe, f, y)?;
                probe.params.get_mut(name).expect("tensor").data[i] = orig;
                Ok((plus - minus) / (2.0 * eps))
            };
            // Richardson extrapolation cancels the O(eps^2) truncation term.
            let (wide, narrow) = (central(PARAM_EPS)?, central(PARAM_EPS / 2.0)?);
            let numeric = (4.0 * narrow - wide) / 3.0;
            let a = if perturb && i == 0 && j == 0 {
                a + perturbation(a)
            } else {
                a
            };
            worst = worst.max(relative_error_floor(a, numeric, PARAM_GRAD_FLOOR));
        }
    }
    Ok(worst)
}

/// Loss sweep over every `(T, U, K)` within the limits, then logit and
/// parameter gradient checks.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, NetworkError> {
    let mut r = GradcheckReport::default();
    for s in 0..cfg.seeds {
        for t in 1..=cfg.max_t {
            for u in 0..=cfg.max_u {
                for k in 2..=cfg.max_k {
                    let seed = derive_seed(cfg.seed, &[s as u64, t as u64, u as u64, k as u64]);
                    let l = random_lattice(t, u, k, seed)?;
                    let fb = rnnt_loss(&l)?.loss;
                    let (bf, _) = brute_force_loss(&l)?;
                    r.max_loss_err = r.max_loss_err.max((fb - bf).abs());
                    r.max_logit_rel_err = r.max_logit_rel_err.max(logit_check(&l, cfg.perturb)?);
                    r.lattice_cases += 1;
                }
            }
        }
    }
    let y = LabelSequence::from_ids_unchecked(vec![1, 2]);
    for s in 0..cfg.model_seeds {
        let m = tiny_model(derive_seed(cfg.seed, &[0x7E57, s as u64]))?;
        for f in tiny_inputs(derive_seed(cfg.seed, &[0x1F, s as u64])) {
            r.max_param_rel_err = r.max_param_rel_err.max(param_check(&m, &f, &y, cfg.perturb)?);
            r.param_cases += 1;
        }
    }
    Ok(r)
}
