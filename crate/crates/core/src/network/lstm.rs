//! Long short-term memory layer with explicit backpropagation through time.
//!
//! Gate order inside the `4H` blocks is input, forget, cell, output. Weights
//! are stored input-major (`w_ih: [in × 4H]`, `w_hh: [H × 4H]`) so one-hot and
//! zero-filled inputs skip whole rows.

use crate::linalg::{add_outer, add_vec_mat, dot, sigmoid, Matrix};

#[derive(Clone, Copy)]
pub(crate) struct LstmWeights<'a> {
    pub w_ih: &'a [f64],
    pub w_hh: &'a [f64],
    pub b: &'a [f64],
    pub hidden: usize,
}

pub(crate) struct LstmGrads<'a> {
    pub w_ih: &'a mut [f64],
    pub w_hh: &'a mut [f64],
    pub b: &'a mut [f64],
}

/// Per-step activations kept for the backward pass, indexed by time.
pub(crate) struct LstmTrace {
    /// Post-activation gates `[T × 4H]`.
    gates: Matrix,
    c: Matrix,
    pub h: Matrix,
    reverse: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl LstmWeights<'_> {
    /// One recurrence step; returns post-activation gates alongside the new state.
    pub fn step(&self, x: &[f64], prev: &LstmState) -> (Vec<f64>, LstmState) {
        let hd = self.hidden;
        let mut z = self.b.to_vec();
        add_vec_mat(&mut z, x, self.w_ih);
        add_vec_mat(&mut z, &prev.h, self.w_hh);
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for j in 0..hd {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hd + j]);
            let g = z[2 * hd + j].tanh();
            let o = sigmoid(z[3 * hd + j]);
            z[j] = i;
            z[hd + j] = f;
            z[2 * hd + j] = g;
            z[3 * hd + j] = o;
            c[j] = f * prev.c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (z, LstmState { h, c })
    }

    pub fn run(&self, xs: &Matrix, reverse: bool) -> LstmTrace {
        let t_len = xs.rows();
        let hd = self.hidden;
        let mut gates = Matrix::zeros(t_len, 4 * hd);
        let mut c = Matrix::zeros(t_len, hd);
        let mut h = Matrix::zeros(t_len, hd);
        let mut state = LstmState::zeros(hd);
        for s in 0..t_len {
            let t = if reverse { t_len - 1 - s } else { s };
            let (g, next) = self.step(xs.row(t), &state);
            gates.row_mut(t).copy_from_slice(&g);
            c.row_mut(t).copy_from_slice(&next.c);
            h.row_mut(t).copy_from_slice(&next.h);
            state = next;
        }
        LstmTrace { gates, c, h, reverse }
    }

    /// Accumulates parameter gradients for upstream gradient `dh` on the
    /// outputs, and input gradients into `dx` when requested.
    pub fn backprop(
        &self,
        xs: &Matrix,
        trace: &LstmTrace,
        dh: &Matrix,
        grads: &mut LstmGrads<'_>,
        mut dx: Option<&mut Matrix>,
    ) {
        let t_len = xs.rows();
        let hd = self.hidden;
        let zero = vec![0.0; hd];
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut dz = vec![0.0; 4 * hd];
        // Walk the processing order backwards.
        for s in (0..t_len).rev() {
            let t = if trace.reverse { t_len - 1 - s } else { s };
            let prev = if s == 0 {
                None
            } else if trace.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let (h_prev, c_prev) = match prev {
                Some(p) => (trace.h.row(p), trace.c.row(p)),
                None => (zero.as_slice(), zero.as_slice()),
            };
            let g = trace.gates.row(t);
            let c = trace.c.row(t);
            let dh_t = dh.row(t);
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let tc = c[j].tanh();
                let dhj = dh_t[j] + dh_next[j];
                let d_o = dhj * tc;
                let dc = dhj * o * (1.0 - tc * tc) + dc_next[j];
                let d_i = dc * gg;
                let d_g = dc * i;
                let d_f = dc * c_prev[j];
                dc_next[j] = dc * f;
                dz[j] = d_i * i * (1.0 - i);
                dz[hd + j] = d_f * f * (1.0 - f);
                dz[2 * hd + j] = d_g * (1.0 - gg * gg);
                dz[3 * hd + j] = d_o * o * (1.0 - o);
            }
            add_outer(grads.w_ih, xs.row(t), &dz);
            add_outer(grads.w_hh, h_prev, &dz);
            for (b, &d) in grads.b.iter_mut().zip(&dz) {
                *b += d;
            }
            for (k, v) in dh_next.iter_mut().enumerate() {
                *v = dot(&self.w_hh[k * 4 * hd..(k + 1) * 4 * hd], &dz);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let n_in = xs.cols();
                let row = dx.row_mut(t);
                for (k, v) in row.iter_mut().enumerate().take(n_in) {
                    *v += dot(&self.w_ih[k * 4 * hd..(k + 1) * 4 * hd], &dz);
                }
            }
        }
    }
}
