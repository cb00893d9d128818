//! RNN-T alignment lattice.
//!
//! [`rnnt_loss`] runs the forward-backward recursions over the `T × (U+1)`
//! lattice in log space and returns `−log p(y|x)` with its gradient with
//! respect to the joint logits. [`brute_force_loss`] enumerates every
//! alignment path instead and serves as the oracle.

use thiserror::Error;

use crate::featpipe::FeatureSequence;
use crate::linalg::{log_add, log_softmax, Matrix};
use crate::symbols::LabelSequence;

/// Largest `T + U` the path enumerator accepts.
pub const BRUTE_FORCE_MAX_STEPS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum TransducerError {
    #[error("lattice needs T >= 1 and K >= 2 (got T={t}, K={k})")]
    Shape { t: usize, k: usize },
    #[error("expected {expected} logits, got {got}")]
    LogitCount { expected: usize, got: usize },
    #[error("target id {0} is blank or out of range")]
    BadTarget(usize),
    #[error("non-finite logit at (t={t}, u={u}, k={k})")]
    NonFinite { t: usize, u: usize, k: usize },
    #[error("T + U = {0} exceeds the enumeration guard")]
    TooLarge(usize),
    #[error("model: {0}")]
    Model(String),
}

/// Joint logits over the full lattice, `[T × (U+1) × K]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLattice {
    t_len: usize,
    k: usize,
    logits: Vec<f64>,
    targets: LabelSequence,
    blank: usize,
}

impl LogitLattice {
    pub fn new(t_len: usize, k: usize, logits: Vec<f64>, targets: LabelSequence) -> Result<Self, TransducerError> {
        let blank = 0;
        if t_len == 0 || k < 2 {
            return Err(TransducerError::Shape { t: t_len, k });
        }
        let expected = t_len * (targets.len() + 1) * k;
        if logits.len() != expected {
            return Err(TransducerError::LogitCount {
                expected,
                got: logits.len(),
            });
        }
        if let Some(&bad) = targets.ids().iter().find(|&&y| y == blank || y >= k) {
            return Err(TransducerError::BadTarget(bad));
        }
        Ok(Self {
            t_len,
            k,
            logits,
            targets,
            blank,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn u_len(&self) -> usize {
        self.targets.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn targets(&self) -> &LabelSequence {
        &self.targets
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn offset(&self, t: usize, u: usize) -> usize {
        (t * (self.u_len() + 1) + u) * self.k
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.logits[o..o + self.k]
    }

    fn check_finite(&self) -> Result<(), TransducerError> {
        if let Some(i) = self.logits.iter().position(|v| !v.is_finite()) {
            let k = i % self.k;
            let node = i / self.k;
            let u1 = self.u_len() + 1;
            return Err(TransducerError::NonFinite {
                t: node / u1,
                u: node % u1,
                k,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeResult {
    /// `−log p(y|x)` in nats.
    pub loss: f64,
    /// `∂loss/∂logits`, same layout as the lattice.
    pub grad: Vec<f64>,
    pub log_alpha: Matrix,
    pub log_beta: Matrix,
}

impl LatticeResult {
    pub fn log_likelihood(&self) -> f64 {
        -self.loss
    }
}

/// Exact transducer loss and logit gradient by forward-backward.
pub fn rnnt_loss(l: &LogitLattice) -> Result<LatticeResult, TransducerError> {
    l.check_finite()?;
    let (t_len, u_len, k) = (l.t_len, l.u_len(), l.k);
    let u1 = u_len + 1;
    let y = l.targets.ids();

    let mut logp = Vec::with_capacity(l.logits.len());
    for node in l.logits.chunks_exact(k) {
        logp.extend(log_softmax(node));
    }
    let at = |t: usize, u: usize| (t * u1 + u) * k;
    let lb = |t: usize, u: usize| logp[at(t, u) + l.blank];
    let ly = |t: usize, u: usize| logp[at(t, u) + y[u]];

    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = Matrix::from_vec(t_len, u1, vec![neg_inf; t_len * u1]);
    alpha.set(0, 0, 0.0);
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha.get(t - 1, u) + lb(t - 1, u)
            } else {
                neg_inf
            };
            let from_label = if u > 0 {
                alpha.get(t, u - 1) + ly(t, u - 1)
            } else {
                neg_inf
            };
            alpha.set(t, u, log_add(from_blank, from_label));
        }
    }

    let mut beta = Matrix::from_vec(t_len, u1, vec![neg_inf; t_len * u1]);
    beta.set(t_len - 1, u_len, lb(t_len - 1, u_len));
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let via_blank = if t + 1 < t_len {
                beta.get(t + 1, u) + lb(t, u)
            } else {
                neg_inf
            };
            let via_label = if u < u_len {
                beta.get(t, u + 1) + ly(t, u)
            } else {
                neg_inf
            };
            beta.set(t, u, log_add(via_blank, via_label));
        }
    }

    let log_p = beta.get(0, 0);
    let loss = -(alpha.get(t_len - 1, u_len) + lb(t_len - 1, u_len));

    let mut grad = vec![0.0; l.logits.len()];
    for t in 0..t_len {
        for u in 0..u1 {
            let a = alpha.get(t, u);
            let occupancy = (a + beta.get(t, u) - log_p).exp();
            if occupancy == 0.0 {
                continue;
            }
            let o = at(t, u);
            let g = &mut grad[o..o + k];
            for (gk, &lp) in g.iter_mut().zip(&logp[o..o + k]) {
                *gk = lp.exp() * occupancy;
            }
            let blank_next = if t + 1 < t_len {
                beta.get(t + 1, u)
            } else if u == u_len {
                0.0
            } else {
                neg_inf
            };
            g[l.blank] -= (a + lb(t, u) + blank_next - log_p).exp();
            if u < u_len {
                g[y[u]] -= (a + ly(t, u) + beta.get(t, u + 1) - log_p).exp();
            }
        }
    }

    Ok(LatticeResult {
        loss,
        grad,
        log_alpha: alpha,
        log_beta: beta,
    })
}

/// Loss by explicit enumeration of every monotonic alignment path, plus the
/// number of paths visited. Probabilities are multiplied directly, not in log
/// space, so this shares no arithmetic with [`rnnt_loss`].
pub fn brute_force_loss(l: &LogitLattice) -> Result<(f64, u64), TransducerError> {
    let steps = l.t_len + l.u_len();
    if steps > BRUTE_FORCE_MAX_STEPS {
        return Err(TransducerError::TooLarge(steps));
    }
    l.check_finite()?;
    let probs: Vec<Vec<f64>> = l
        .logits
        .chunks_exact(l.k)
        .map(|node| {
            let m = node.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = node.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();

    struct Walk<'a> {
        l: &'a LogitLattice,
        probs: Vec<Vec<f64>>,
        total: f64,
        paths: u64,
    }
    impl Walk<'_> {
        fn p(&self, t: usize, u: usize, sym: usize) -> f64 {
            self.probs[t * (self.l.u_len() + 1) + u][sym]
        }
        fn go(&mut self, t: usize, u: usize, acc: f64) {
            let (t_len, u_len) = (self.l.t_len, self.l.u_len());
            if t == t_len - 1 && u == u_len {
                self.total += acc * self.p(t, u, self.l.blank);
                self.paths += 1;
                return;
            }
            if t + 1 < t_len {
                let pb = self.p(t, u, self.l.blank);
                self.go(t + 1, u, acc * pb);
            }
            if u < u_len {
                let py = self.p(t, u, self.l.targets.ids()[u]);
                self.go(t, u + 1, acc * py);
            }
        }
    }

    let mut w = Walk {
        l,
        probs,
        total: 0.0,
        paths: 0,
    };
    w.go(0, 0, 1.0);
    Ok((-w.total.ln(), w.paths))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Denominator floor for parameter-level finite-difference checks: central
/// differences resolve derivatives only to ~1e-12 absolute, so gradients
/// below this magnitude are compared on an absolute scale.
pub const PARAM_GRAD_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    relative_error_floor(a, n, 1e-12)
}

pub fn relative_error_floor(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central finite differences of the loss against the analytic logit
/// gradient.
pub fn grad_check(l: &LogitLattice, epsilon: f64) -> Result<GradCheck, TransducerError> {
    if l.t_len + l.u_len() > BRUTE_FORCE_MAX_STEPS {
        return Err(TransducerError::TooLarge(l.t_len + l.u_len()));
    }
    let analytic = rnnt_loss(l)?.grad;
    let mut probe = l.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..l.logits.len() {
        let orig = probe.logits[i];
        probe.logits[i] = orig + epsilon;
        let plus = rnnt_loss(&probe)?.loss;
        probe.logits[i] = orig - epsilon;
        let minus = rnnt_loss(&probe)?.loss;
        probe.logits[i] = orig;
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    let (mut max_rel_err, mut max_abs_err) = (0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(&numeric) {
        max_rel_err = max_rel_err.max(relative_error(a, n));
        max_abs_err = max_abs_err.max((a - n).abs());
    }
    Ok(GradCheck {
        max_rel_err,
        max_abs_err,
        analytic,
        numeric,
    })
}

/// Minimal interface a transducer network exposes for decoding.
pub trait TransducerModel {
    type State: Clone;

    fn blank(&self) -> usize {
        0
    }

    /// Per-frame encoder rows in whatever form [`TransducerModel::joint`] consumes.
    fn encode(&self, features: &FeatureSequence) -> Result<Matrix, TransducerError>;

    /// Prediction state with empty label history.
    fn initial_state(&self) -> Self::State;

    /// Prediction state after consuming `symbol`.
    fn advance(&self, state: &Self::State, symbol: usize) -> Self::State;

    fn joint(&self, encoded: &[f64], state: &Self::State) -> Vec<f64>;
}

/// Frame-synchronous greedy search. At each frame the argmax symbol is
/// emitted until BLANK wins or `max_symbols_per_frame` emissions are reached.
pub fn greedy_decode<M: TransducerModel>(
    model: &M,
    features: &FeatureSequence,
    max_symbols_per_frame: usize,
) -> Result<LabelSequence, TransducerError> {
    let enc = model.encode(features)?;
    let cap = max_symbols_per_frame.max(1);
    let blank = model.blank();
    let mut state = model.initial_state();
    let mut out = Vec::new();
    for row in enc.iter_rows() {
        for _ in 0..cap {
            let logits = model.joint(row, &state);
            let best = argmax(&logits);
            if best == blank {
                break;
            }
            out.push(best);
            state = model.advance(&state, best);
        }
    }
    Ok(LabelSequence::from_ids_unchecked(out))
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
