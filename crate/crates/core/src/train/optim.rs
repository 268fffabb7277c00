use crate::config::str_enum;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

str_enum!(OptimizerKind, "train.optimizer", { "adam" => OptimizerKind::Adam, "sgd" => OptimizerKind::Sgd });

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step count and per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

const STATE_MAGIC: &[u8; 8] = b"QVIADAM1";

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Little-endian layout: magic, step (u64), parameter count (u64), then
    /// per parameter its length (u64), `m` and `v` as f64 bit patterns.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STATE_MAGIC.to_vec();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Data("truncated or corrupt optimizer state".into());
        let mut pos = 0;
        let mut word = || -> Result<u64> {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(bad)?;
            pos += 8;
            Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
        };
        if word()?.to_le_bytes() != *STATE_MAGIC {
            return Err(Error::Data("not an optimizer state".into()));
        }
        let step = word()?;
        let count = word()? as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let len = word()? as usize;
            let mut read = |n: usize| (0..n).map(|_| word().map(f64::from_bits)).collect::<Result<Vec<_>>>();
            m.push(read(len)?);
            v.push(read(len)?);
        }
        Ok(AdamState { step, m, v })
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// left untouched and their moments are not advanced.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let p = store.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

pub fn sgd_step(store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if let Some(g) = &grads[i] {
            for (p, gk) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gk;
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// An optimizer with its state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(AdamConfig, AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamConfig::new(lr), AdamState::new(store)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        match self {
            Optimizer::Adam(cfg, state) => adam_step(store, grads, state, cfg),
            Optimizer::Sgd { lr } => sgd_step(store, grads, *lr),
        }
    }
}
