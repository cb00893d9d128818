//! AdamW with decoupled weight decay and per-tensor step counts.

use std::collections::{BTreeMap, BTreeSet};

use crate::network::{Grads, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Steps tensor `n` in `active` only. Tensors outside the set are left
    /// untouched: no decay and no moment update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, active: &BTreeSet<String>, lr: f64) {
        let c = &self.config;
        for (name, tensor) in params.iter_mut() {
            if !active.contains(name) {
                continue;
            }
            let g = grads.get(name).expect("gradient for every tensor");
            let st = self.state.entry(name.to_string()).or_default();
            if st.m.len() != g.len() {
                // Fresh tensor, or rows appended by vocabulary extension.
                st.m.resize(g.len(), 0.0);
                st.v.resize(g.len(), 0.0);
            }
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t as i32);
            let bc2 = 1.0 - c.beta2.powi(st.t as i32);
            for (i, p) in tensor.data.iter_mut().enumerate() {
                *p -= lr * c.weight_decay * *p;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}
