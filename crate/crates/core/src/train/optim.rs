//! Optimization machinery: bias-corrected Adam, linear-warmup cosine
//! learning-rate schedule, global-norm gradient clipping, elementwise
//! weight clipping, and exponential moving-average shadow weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Call once per optimizer step, before updating any tensor.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Standard bias-corrected Adam update of one parameter tensor from
    /// its accumulated gradient. No-op if the tensor has no gradient.
    pub fn update(&mut self, name: &str, param: &mut Tensor, lr: f64) {
        let Some(grad) = param.grad().map(|g| g.to_vec()) else {
            return;
        };
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        debug_assert_eq!(m.len(), grad.len(), "moment shape changed for {name}");
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = f64::from(*g);
            let m_new = ADAM_BETA1 * f64::from(*mi) + (1.0 - ADAM_BETA1) * g;
            let v_new = ADAM_BETA2 * f64::from(*vi) + (1.0 - ADAM_BETA2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *p = (f64::from(*p) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

/// Schedule parameters for [`lr_at`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear warmup from 0 to `lr0` over `warmup_steps`, then cosine decay
/// reaching `lr_min` at `total_steps`.
pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.lr0 * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return s.lr_min;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let t = (step - s.warmup_steps) as f64 / span;
    s.lr_min + 0.5 * (s.lr0 - s.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales every gradient so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [&mut Tensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid_argument(format!(
            "gradient clip norm must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0f64;
    for t in grads.iter() {
        if let Some(g) = t.grad() {
            for &v in g {
                sq += f64::from(v) * f64::from(v);
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for t in grads.iter_mut() {
            if t.grad().is_some() {
                for v in t.grad_mut() {
                    *v *= scale;
                }
            }
        }
    }
    Ok(norm)
}

/// Elementwise clamp of parameter values into `[lo, hi]`.
pub fn clip_weights(param: &mut Tensor, lo: f32, hi: f32) -> Result<()> {
    if !(lo < hi) {
        return Err(Error::invalid_argument(format!(
            "weight clip bounds out of order: [{lo}, {hi}]"
        )));
    }
    for v in param.data_mut() {
        *v = v.clamp(lo, hi);
    }
    Ok(())
}

/// Exponential moving average of parameter values, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: BTreeMap<String, Vec<f32>>,
}

impl Ema {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid_argument(format!(
                "ema decay must lie in [0, 1), got {decay}"
            )));
        }
        Ok(Ema {
            decay,
            shadow: BTreeMap::new(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`; a missing entry
    /// initializes to a copy.
    pub fn update(&mut self, name: &str, param: &Tensor) {
        match self.shadow.get_mut(name) {
            None => {
                self.shadow.insert(name.to_string(), param.data().to_vec());
            }
            Some(s) => {
                debug_assert_eq!(s.len(), param.numel());
                for (sv, pv) in s.iter_mut().zip(param.data()) {
                    *sv = (self.decay * f64::from(*sv) + (1.0 - self.decay) * f64::from(*pv))
                        as f32;
                }
            }
        }
    }

    /// Overwrites a parameter tensor with its shadow value.
    pub fn apply(&self, name: &str, param: &mut Tensor) -> Result<()> {
        let s = self.shadow.get(name).ok_or_else(|| {
            Error::invalid_state(format!("ema shadow has no entry for parameter '{name}'"))
        })?;
        if s.len() != param.numel() {
            return Err(Error::invalid_state(format!(
                "ema shadow for '{name}' has {} values, parameter has {}",
                s.len(),
                param.numel()
            )));
        }
        param.data_mut().copy_from_slice(s);
        Ok(())
    }
}
