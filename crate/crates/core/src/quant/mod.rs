//! Affine quantization machinery: range observers, scale/zero-point
//! computation, and fake quantization with straight-through gradients.
//!
//! Scheme: per-output-channel symmetric int8 weights, per-tensor affine
//! uint8 activations, int32 biases. Rounding is round-half-to-even
//! everywhere — in fake quantization and in the integer path — so the two
//! paths compare deterministically.

mod graph;
mod qat;

pub use graph::{export_graph, import_graph, integer_infer, simulate_fake_quant, DeployGraph, GraphLayer, GraphOp, QTensor};
pub use qat::{insert_qat, set_phase, ActNode, Phase, PhaseSchedule, QatModel, WeightNode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// uint8 activation bounds.
pub const ACT_QMIN: i32 = 0;
pub const ACT_QMAX: i32 = 255;
/// Symmetric int8 weight bounds.
pub const WEIGHT_QMIN: i32 = -127;
pub const WEIGHT_QMAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

/// Affine quantization parameters. `scales` holds one entry per tensor or
/// one per output channel depending on `granularity`; per-channel
/// quantization is always symmetric (`zero_point` 0).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid_argument(format!(
                "quant params need positive finite scales, got {:?}",
                self.scales
            )));
        }
        if self.zero_point < self.qmin || self.zero_point > self.qmax {
            return Err(Error::invalid_argument(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point, self.qmin, self.qmax
            )));
        }
        if self.granularity == Granularity::PerChannel && self.zero_point != 0 {
            return Err(Error::invalid_argument(
                "per-channel quantization must be symmetric (zero point 0)",
            ));
        }
        Ok(())
    }
}

/// Quantizes one value; returns the clamped level and whether it was
/// within bounds before clamping.
#[inline]
pub fn quantize_value(x: f32, scale: f32, zero_point: i32, qmin: i32, qmax: i32) -> (i32, bool) {
    let q = (f64::from(x) / f64::from(scale)).round_ties_even() as i64 + i64::from(zero_point);
    let unclipped = q >= i64::from(qmin) && q <= i64::from(qmax);
    (q.clamp(i64::from(qmin), i64::from(qmax)) as i32, unclipped)
}

#[inline]
pub fn dequantize_value(q: i32, scale: f32, zero_point: i32) -> f32 {
    ((i64::from(q) - i64::from(zero_point)) as f64 * f64::from(scale)) as f32
}

/// Scale and zero point for an observed `[min, max]` range.
///
/// The range is widened to include zero. Asymmetric:
/// `scale = (max - min) / (qmax - qmin)`, `zp = round(qmin - min / scale)`
/// clamped to bounds. Symmetric: `scale = max(|min|, |max|) / qmax`,
/// `zp = 0`. The all-zero degenerate range maps to scale 1, zero point 0.
pub fn compute_qparams(min: f32, max: f32, qmin: i32, qmax: i32, symmetric: bool) -> Result<QuantParams> {
    if !(min <= max) {
        return Err(Error::invalid_argument(format!(
            "compute_qparams: min {min} > max {max}"
        )));
    }
    let mn = min.min(0.0);
    let mx = max.max(0.0);
    let (scale, zero_point) = if mn == 0.0 && mx == 0.0 {
        (1.0f32, 0)
    } else if symmetric {
        let bound = mn.abs().max(mx.abs());
        (bound / qmax as f32, 0)
    } else {
        // zero point from the exact ratio, before the scale rounds to f32
        let scale = (f64::from(mx) - f64::from(mn)) / f64::from(qmax - qmin);
        let zp = (f64::from(qmin) - f64::from(mn) / scale).round_ties_even() as i64;
        (scale as f32, zp.clamp(i64::from(qmin), i64::from(qmax)) as i32)
    };
    let qp = QuantParams {
        scales: vec![scale],
        zero_point,
        qmin,
        qmax,
        granularity: Granularity::PerTensor,
    };
    qp.validate()?;
    Ok(qp)
}

/// Per-output-channel symmetric parameters from per-channel extrema.
pub fn compute_qparams_per_channel(
    mins: &[f32],
    maxs: &[f32],
    qmin: i32,
    qmax: i32,
) -> Result<QuantParams> {
    if mins.len() != maxs.len() || mins.is_empty() {
        return Err(Error::invalid_argument(
            "per-channel qparams need matching non-empty extrema",
        ));
    }
    let mut scales = Vec::with_capacity(mins.len());
    for (&mn, &mx) in mins.iter().zip(maxs) {
        if !(mn <= mx) {
            return Err(Error::invalid_argument(format!(
                "compute_qparams: min {mn} > max {mx}"
            )));
        }
        let bound = mn.min(0.0).abs().max(mx.max(0.0).abs());
        scales.push(if bound == 0.0 { 1.0 } else { bound / qmax as f32 });
    }
    let qp = QuantParams {
        scales,
        zero_point: 0,
        qmin,
        qmax,
        granularity: Granularity::PerChannel,
    };
    qp.validate()?;
    Ok(qp)
}

/// Quantize-dequantize in floating point. Per-channel parameters index the
/// first tensor dimension.
pub fn fake_quant(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    qp.validate()?;
    let mut out = Tensor::zeros(x.shape());
    match qp.granularity {
        Granularity::PerTensor => {
            let s = qp.scale();
            for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
                let (q, _) = quantize_value(*v, s, qp.zero_point, qp.qmin, qp.qmax);
                *o = dequantize_value(q, s, qp.zero_point);
            }
        }
        Granularity::PerChannel => {
            let c = x.shape()[0];
            if qp.scales.len() != c {
                return Err(Error::invalid_argument(format!(
                    "per-channel fake_quant: {} scales for {} channels",
                    qp.scales.len(),
                    c
                )));
            }
            let row = x.numel() / c;
            for (ci, &s) in qp.scales.iter().enumerate() {
                let src = &x.data()[ci * row..(ci + 1) * row];
                let dst = &mut out.data_mut()[ci * row..(ci + 1) * row];
                for (o, v) in dst.iter_mut().zip(src) {
                    let (q, _) = quantize_value(*v, s, 0, qp.qmin, qp.qmax);
                    *o = dequantize_value(q, s, 0);
                }
            }
        }
    }
    Ok(out)
}

/// Straight-through gradient of [`fake_quant`]: the incoming gradient
/// passes unchanged where the value stayed within bounds and is zero where
/// it was clipped.
pub fn fake_quant_grad(x: &Tensor, qp: &QuantParams, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::invalid_argument(format!(
            "fake_quant_grad shape mismatch: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    qp.validate()?;
    let mut out = Tensor::zeros(x.shape());
    match qp.granularity {
        Granularity::PerTensor => {
            let s = qp.scale();
            for ((o, v), g) in out.data_mut().iter_mut().zip(x.data()).zip(grad_out.data()) {
                let (_, unclipped) = quantize_value(*v, s, qp.zero_point, qp.qmin, qp.qmax);
                *o = if unclipped { *g } else { 0.0 };
            }
        }
        Granularity::PerChannel => {
            let c = x.shape()[0];
            let row = x.numel() / c;
            for (ci, &s) in qp.scales.iter().enumerate() {
                for i in ci * row..(ci + 1) * row {
                    let (_, unclipped) = quantize_value(x.data()[i], s, 0, qp.qmin, qp.qmax);
                    out.data_mut()[i] = if unclipped { grad_out.data()[i] } else { 0.0 };
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObserverMode {
    MinMax,
    Ema { decay: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverState {
    Active,
    Disabled,
    Frozen,
}

/// Running range statistics feeding [`compute_qparams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observer {
    pub mode: ObserverMode,
    pub state: ObserverState,
    pub min: f32,
    pub max: f32,
    pub initialized: bool,
}

impl Observer {
    pub fn new(mode: ObserverMode) -> Self {
        Observer {
            mode,
            state: ObserverState::Active,
            min: 0.0,
            max: 0.0,
            initialized: false,
        }
    }

    /// Folds a batch into the running extrema. Disabled and frozen
    /// observers ignore samples.
    pub fn observe(&mut self, data: &[f32]) {
        if self.state != ObserverState::Active || data.is_empty() {
            return;
        }
        let mut bmin = f32::INFINITY;
        let mut bmax = f32::NEG_INFINITY;
        for &v in data {
            bmin = bmin.min(v);
            bmax = bmax.max(v);
        }
        if !self.initialized {
            self.min = bmin;
            self.max = bmax;
            self.initialized = true;
            return;
        }
        match self.mode {
            ObserverMode::MinMax => {
                self.min = self.min.min(bmin);
                self.max = self.max.max(bmax);
            }
            ObserverMode::Ema { decay } => {
                self.min = decay * self.min + (1.0 - decay) * bmin;
                self.max = decay * self.max + (1.0 - decay) * bmax;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qparams_closed_forms() {
        // [0, 2.55] uint8 -> scale 0.01, zp 0
        let qp = compute_qparams(0.0, 2.55, ACT_QMIN, ACT_QMAX, false).unwrap();
        assert!((qp.scale() - 0.01).abs() < 1e-9);
        assert_eq!(qp.zero_point, 0);

        // [-1, 1] uint8 asymmetric -> scale 2/255, zp 128
        let qp = compute_qparams(-1.0, 1.0, ACT_QMIN, ACT_QMAX, false).unwrap();
        assert!((qp.scale() - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(qp.zero_point, 128);

        // symmetric weights in [-0.5, 0.3] -> scale 0.5/127, zp 0
        let qp = compute_qparams(-0.5, 0.3, WEIGHT_QMIN, WEIGHT_QMAX, true).unwrap();
        assert!((qp.scale() - 0.5 / 127.0).abs() < 1e-9);
        assert_eq!(qp.zero_point, 0);

        // degenerate all-zero range
        let qp = compute_qparams(0.0, 0.0, ACT_QMIN, ACT_QMAX, false).unwrap();
        assert_eq!(qp.scale(), 1.0);
        assert_eq!(qp.zero_point, 0);

        // range not containing zero is widened
        let qp = compute_qparams(0.5, 1.0, ACT_QMIN, ACT_QMAX, false).unwrap();
        assert!((qp.scale() - 1.0 / 255.0).abs() < 1e-9);

        assert!(compute_qparams(1.0, 0.0, ACT_QMIN, ACT_QMAX, false).is_err());
    }

    #[test]
    fn fake_quant_formula_and_clipping() {
        let qp = QuantParams {
            scales: vec![0.1],
            zero_point: 0,
            qmin: -127,
            qmax: 127,
            granularity: Granularity::PerTensor,
        };
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.34, 20.0]).unwrap();
        let y = fake_quant(&x, &qp).unwrap();
        assert!((y.data()[0] - 0.3).abs() < 1e-6);
        assert!((y.data()[1] - 12.7).abs() < 1e-5);

        let g = fake_quant_grad(&x, &qp, &Tensor::filled([1, 1, 1, 2], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fake_quant_idempotent() {
        let qp = compute_qparams(-0.7, 1.3, ACT_QMIN, ACT_QMAX, false).unwrap();
        let x = Tensor::from_vec(
            [1, 1, 4, 4],
            (0..16).map(|i| (i as f32 * 0.731).sin()).collect(),
        )
        .unwrap();
        let once = fake_quant(&x, &qp).unwrap();
        let twice = fake_quant(&once, &qp).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn fake_quant_level_count() {
        let qp = QuantParams {
            scales: vec![0.25],
            zero_point: 10,
            qmin: 0,
            qmax: 20,
            granularity: Granularity::PerTensor,
        };
        let x = Tensor::from_vec(
            [1, 1, 10, 10],
            (0..100).map(|i| (i as f32 - 50.0) * 0.09).collect(),
        )
        .unwrap();
        let y = fake_quant(&x, &qp).unwrap();
        let mut levels: Vec<i32> = y
            .data()
            .iter()
            .map(|&v| (f64::from(v) / 0.25).round_ties_even() as i32)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        assert!(levels.len() <= 21, "{} distinct levels", levels.len());
    }

    #[test]
    fn observer_modes() {
        let mut o = Observer::new(ObserverMode::MinMax);
        o.observe(&[-1.0, 2.0]);
        assert_eq!((o.min, o.max), (-1.0, 2.0));
        o.observe(&[-0.5, 0.5]); // smaller batch leaves extrema unchanged
        assert_eq!((o.min, o.max), (-1.0, 2.0));

        let mut o = Observer::new(ObserverMode::Ema { decay: 0.9 });
        o.observe(&[0.0, 1.0]);
        o.observe(&[0.0, 2.0]);
        assert!((o.max - 1.1).abs() < 1e-6);
        assert_eq!(o.min, 0.0);

        let mut o = Observer::new(ObserverMode::MinMax);
        o.state = ObserverState::Disabled;
        o.observe(&[5.0]);
        assert!(!o.initialized);
    }

    #[test]
    fn per_channel_roundtrip_error_bound() {
        let qp = compute_qparams_per_channel(&[-0.5, -0.1], &[0.4, 0.9], WEIGHT_QMIN, WEIGHT_QMAX)
            .unwrap();
        let x = Tensor::from_vec([2, 1, 2, 2], vec![0.3, -0.45, 0.1, 0.0, 0.8, -0.05, 0.2, 0.7])
            .unwrap();
        let y = fake_quant(&x, &qp).unwrap();
        for ci in 0..2 {
            let s = f64::from(qp.scales[ci]);
            for i in ci * 4..(ci + 1) * 4 {
                let err = (f64::from(x.data()[i]) - f64::from(y.data()[i])).abs();
                assert!(err <= s / 2.0 + 1e-12, "channel {ci}: err {err} > {}", s / 2.0);
            }
        }
    }
}
