//! Training objectives: L1, Charbonnier, blockwise-DCT frequency loss,
//! confidence-weighted distillation, and the stage-wise composites.
//!
//! Every loss returns `(value, gradient w.r.t. the prediction)` with the
//! value accumulated in f64. All losses are means over elements, so the
//! stage weights are independent of image size.

use crate::dct::{dct2_block, idct2_block, BLOCK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training stage of the curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_number(n: u32) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::invalid_argument(format!("no such stage: {n}"))),
        }
    }
}

/// Resolved loss weights for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w_char: f32,
    pub w_dct: f32,
    pub w_kd: f32,
    pub eps_char: f32,
    pub gamma: f32,
    pub w_min: f32,
    pub w_max: f32,
}

pub const EPS_CHAR: f32 = 1e-3;
pub const CONF_GAMMA: f32 = 10.0;
pub const CONF_W_MIN: f32 = 0.10;
pub const CONF_W_MAX: f32 = 0.75;

pub const STAGE2_W_DCT: f32 = 0.02;
pub const STAGE2_W_KD: f32 = 0.03;
pub const STAGE3_W_DCT: f32 = 0.015;
pub const STAGE3_W_KD_START: f32 = 0.03;
pub const STAGE3_W_KD_END: f32 = 0.01;

impl LossWeights {
    /// Weights for `stage` at `step` of a stage lasting `stage_len` steps.
    ///
    /// The stage-3 distillation weight decays linearly from the stage-2
    /// value 0.03 down to 0.01 across the stage.
    pub fn for_stage(stage: Stage, step: u64, stage_len: u64) -> LossWeights {
        let (w_char, w_dct, w_kd) = match stage {
            Stage::One => (1.0, 0.0, 0.0),
            Stage::Two => (1.0, STAGE2_W_DCT, STAGE2_W_KD),
            Stage::Three => {
                let t = if stage_len <= 1 {
                    0.0
                } else {
                    (step.min(stage_len - 1)) as f32 / (stage_len - 1) as f32
                };
                let w_kd = STAGE3_W_KD_START + t * (STAGE3_W_KD_END - STAGE3_W_KD_START);
                (1.0, STAGE3_W_DCT, w_kd)
            }
        };
        LossWeights {
            w_char,
            w_dct,
            w_kd,
            eps_char: EPS_CHAR,
            gamma: CONF_GAMMA,
            w_min: CONF_W_MIN,
            w_max: CONF_W_MAX,
        }
    }
}

fn check_same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_argument(format!(
            "{name}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference. The gradient at exact ties is zero.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape("l1_loss", pred, target)?;
    let n = pred.numel() as f64;
    let mut sum = 0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = f64::from(*p) - f64::from(*t);
        sum += d.abs();
        *g = (d.signum() * (d != 0.0) as u8 as f64 / n) as f32;
    }
    Ok((sum / n, grad))
}

/// Mean of `sqrt(diff^2 + eps^2)`: a smooth L1 with floor `eps`.
pub fn charbonnier_loss(pred: &Tensor, target: &Tensor, eps: f32) -> Result<(f64, Tensor)> {
    check_same_shape("charbonnier_loss", pred, target)?;
    if !(eps > 0.0) {
        return Err(Error::invalid_argument(format!(
            "charbonnier eps must be positive, got {eps}"
        )));
    }
    let n = pred.numel() as f64;
    let e2 = f64::from(eps) * f64::from(eps);
    let mut sum = 0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = f64::from(*p) - f64::from(*t);
        let root = (d * d + e2).sqrt();
        sum += root;
        *g = (d / (root * n)) as f32;
    }
    Ok((sum / n, grad))
}

/// Pads one channel plane to multiples of the DCT block size by mirroring
/// rows/columns inward from the edge (the edge sample is included in the
/// mirror, so any image size down to 1x1 pads cleanly).
fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        let over = i - len;
        // mirrors len-1, len-2, ...; padding never exceeds BLOCK-1 < len guard below
        len - 1 - (over % len)
    }
}

fn padded_len(n: usize) -> usize {
    n.div_ceil(BLOCK) * BLOCK
}

/// Mean absolute difference of blockwise DCT coefficients.
///
/// Images are reflect-padded to multiples of 8, split into non-overlapping
/// 8x8 blocks per channel, and transformed with the orthonormal DCT-II.
/// The mean runs over every coefficient of the padded planes. The gradient
/// applies the inverse transform to the per-block sign field and folds the
/// padded positions back onto their source pixels.
pub fn dct_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape("dct_loss", pred, target)?;
    let [n, c, h, w] = pred.shape();
    if h == 0 || w == 0 {
        return Err(Error::invalid_argument("dct_loss on empty tensor"));
    }
    let (ph, pw) = (padded_len(h), padded_len(w));
    let m = (n * c * ph * pw) as f64;

    let mut sum = 0f64;
    let mut grad = Tensor::zeros(pred.shape());

    let mut pblock = [0f32; BLOCK * BLOCK];
    let mut tblock = [0f32; BLOCK * BLOCK];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let pplane = &pred.data()[base..base + h * w];
            let tplane = &target.data()[base..base + h * w];
            for by in (0..ph).step_by(BLOCK) {
                for bx in (0..pw).step_by(BLOCK) {
                    for i in 0..BLOCK {
                        let sy = reflect_index(by + i, h);
                        for j in 0..BLOCK {
                            let sx = reflect_index(bx + j, w);
                            pblock[i * BLOCK + j] = pplane[sy * w + sx];
                            tblock[i * BLOCK + j] = tplane[sy * w + sx];
                        }
                    }
                    let pc = dct2_block(&pblock);
                    let tc = dct2_block(&tblock);
                    let mut signs = [0f32; BLOCK * BLOCK];
                    for k in 0..BLOCK * BLOCK {
                        let d = f64::from(pc[k]) - f64::from(tc[k]);
                        sum += d.abs();
                        signs[k] = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    let gblock = idct2_block(&signs);
                    let gplane = &mut grad.data_mut()[base..base + h * w];
                    for i in 0..BLOCK {
                        let sy = reflect_index(by + i, h);
                        for j in 0..BLOCK {
                            let sx = reflect_index(bx + j, w);
                            gplane[sy * w + sx] += (f64::from(gblock[i * BLOCK + j]) / m) as f32;
                        }
                    }
                }
            }
        }
    }
    Ok((sum / m, grad))
}

/// Per-pixel distillation confidence from teacher error against ground
/// truth: `w = clip(exp(-gamma * e), w_min, w_max)` with `e` the channel
/// mean of `|teacher - target|`. Returns an `(N, 1, H, W)` map.
pub fn confidence_weights(
    teacher: &Tensor,
    target: &Tensor,
    gamma: f32,
    w_min: f32,
    w_max: f32,
) -> Result<Tensor> {
    check_same_shape("confidence_weights", teacher, target)?;
    if !(0.0 < w_min && w_min <= w_max && w_max <= 1.0) {
        return Err(Error::invalid_argument(format!(
            "confidence clip bounds must satisfy 0 < w_min <= w_max <= 1, got [{w_min}, {w_max}]"
        )));
    }
    let [n, c, h, w] = teacher.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for ni in 0..n {
        for p in 0..plane {
            let mut e = 0f64;
            for ci in 0..c {
                let idx = (ni * c + ci) * plane + p;
                e += (f64::from(teacher.data()[idx]) - f64::from(target.data()[idx])).abs();
            }
            e /= c as f64;
            let wv = (-f64::from(gamma) * e).exp();
            out.data_mut()[ni * plane + p] = (wv as f32).clamp(w_min, w_max);
        }
    }
    Ok(out)
}

/// Confidence-weighted L1 toward the teacher prediction. `weights` is the
/// `(N, 1, H, W)` map from [`confidence_weights`], broadcast across
/// channels and treated as a constant under differentiation.
pub fn kd_loss(pred: &Tensor, teacher: &Tensor, weights: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape("kd_loss", pred, teacher)?;
    let [n, c, h, w] = pred.shape();
    if weights.shape() != [n, 1, h, w] {
        return Err(Error::invalid_argument(format!(
            "kd_loss: weight map shape {:?} does not match (N, 1, H, W) = {:?}",
            weights.shape(),
            [n, 1, h, w]
        )));
    }
    let plane = h * w;
    let m = pred.numel() as f64;
    let mut sum = 0f64;
    let mut grad = Tensor::zeros(pred.shape());
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..plane {
                let idx = (ni * c + ci) * plane + p;
                let wv = f64::from(weights.data()[ni * plane + p]);
                let d = f64::from(pred.data()[idx]) - f64::from(teacher.data()[idx]);
                sum += wv * d.abs();
                grad.data_mut()[idx] = (wv * d.signum() * (d != 0.0) as u8 as f64 / m) as f32;
            }
        }
    }
    Ok((sum / m, grad))
}

/// Per-component values of a composite loss, for the metrics log.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub total: f64,
    pub charbonnier: f64,
    pub l1: f64,
    pub dct: f64,
    pub kd: f64,
}

/// Composite objective for one training stage.
///
/// Stage 1 is plain L1; stages 2 and 3 combine Charbonnier, the DCT loss,
/// and confidence-weighted distillation with the resolved weights. The
/// teacher prediction is required from stage 2 on.
pub fn stage_loss(
    stage: Stage,
    pred: &Tensor,
    target: &Tensor,
    teacher: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<(f64, Tensor)> {
    let (parts, grad) = stage_loss_masked(stage, pred, target, teacher, weights, None)?;
    Ok((parts.total, grad))
}

/// Like [`stage_loss`] but also reports the unweighted components.
pub fn stage_loss_parts(
    stage: Stage,
    pred: &Tensor,
    target: &Tensor,
    teacher: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<(LossParts, Tensor)> {
    stage_loss_masked(stage, pred, target, teacher, weights, None)
}

/// Batch variant of [`stage_loss`]: `kd_mask`, when given, disables the
/// distillation term for individual batch samples (their confidence rows
/// zero out), which implements the skip-sample policy for images without
/// a cached teacher prediction.
pub fn stage_loss_masked(
    stage: Stage,
    pred: &Tensor,
    target: &Tensor,
    teacher: Option<&Tensor>,
    weights: &LossWeights,
    kd_mask: Option<&[bool]>,
) -> Result<(LossParts, Tensor)> {
    match stage {
        Stage::One => {
            let (l, g) = l1_loss(pred, target)?;
            Ok((
                LossParts {
                    total: l,
                    l1: l,
                    ..Default::default()
                },
                g,
            ))
        }
        Stage::Two | Stage::Three => {
            let teacher = teacher.ok_or_else(|| {
                Error::invalid_argument(format!(
                    "stage {} loss requires a teacher prediction",
                    stage.number()
                ))
            })?;
            let (l_char, g_char) = charbonnier_loss(pred, target, weights.eps_char)?;
            let (l_dct, g_dct) = dct_loss(pred, target)?;
            let mut conf =
                confidence_weights(teacher, target, weights.gamma, weights.w_min, weights.w_max)?;
            if let Some(mask) = kd_mask {
                let [n, _, h, w] = conf.shape();
                if mask.len() != n {
                    return Err(Error::invalid_argument(format!(
                        "kd mask has {} entries for a batch of {n}",
                        mask.len()
                    )));
                }
                for (i, &keep) in mask.iter().enumerate() {
                    if !keep {
                        conf.data_mut()[i * h * w..(i + 1) * h * w].fill(0.0);
                    }
                }
            }
            let (l_kd, g_kd) = kd_loss(pred, teacher, &conf)?;

            let total = f64::from(weights.w_char) * l_char
                + f64::from(weights.w_dct) * l_dct
                + f64::from(weights.w_kd) * l_kd;
            let mut grad = Tensor::zeros(pred.shape());
            for (((g, gc), gd), gk) in grad
                .data_mut()
                .iter_mut()
                .zip(g_char.data())
                .zip(g_dct.data())
                .zip(g_kd.data())
            {
                *g = weights.w_char * gc + weights.w_dct * gd + weights.w_kd * gk;
            }
            Ok((
                LossParts {
                    total,
                    charbonnier: l_char,
                    dct: l_dct,
                    kd: l_kd,
                    ..Default::default()
                },
                grad,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: [usize; 4], f: impl Fn(usize) -> f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn l1_basics() {
        let a = tensor([1, 1, 2, 2], |i| i as f32 * 0.1);
        let (l, _) = l1_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        let b = a.map(|v| v - 0.5);
        let (l, g) = l1_loss(&a, &b).unwrap();
        assert!((l - 0.5).abs() < 1e-7);
        assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn charbonnier_floor_and_value() {
        let a = tensor([1, 1, 2, 2], |i| i as f32 * 0.3);
        let (l, _) = charbonnier_loss(&a, &a, 1e-3).unwrap();
        assert!((l - 1e-3).abs() < 1e-9);
        let b = a.map(|v| v + 3e-3);
        let (l, _) = charbonnier_loss(&b, &a, 1e-3).unwrap();
        assert!((l - (1e-5f64).sqrt()).abs() < 1e-8, "{l}");
    }

    #[test]
    fn charbonnier_approaches_l1() {
        let a = tensor([1, 1, 4, 4], |i| (i as f32 * 0.7).sin());
        let b = tensor([1, 1, 4, 4], |i| (i as f32 * 0.3).cos());
        for eps in [1e-2f32, 1e-4] {
            let (lc, _) = charbonnier_loss(&a, &b, eps).unwrap();
            let (l1, _) = l1_loss(&a, &b).unwrap();
            assert!((lc - l1).abs() <= f64::from(eps), "eps {eps}: {lc} vs {l1}");
            assert!(lc >= l1);
        }
    }

    #[test]
    fn dct_loss_zero_and_dc_shift() {
        let a = tensor([1, 1, 8, 8], |i| (i as f32 * 0.13).sin() * 0.5 + 0.5);
        let (l, g) = dct_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        // constant offset hits only the DC coefficient: loss = |c| * N / N^2
        let c = 0.25f32;
        let b = a.map(|v| v + c);
        let (l, _) = dct_loss(&b, &a).unwrap();
        assert!((l - f64::from(c) / 8.0).abs() < 1e-7, "{l}");
    }

    #[test]
    fn dct_loss_pads_non_multiple_sizes() {
        let a = tensor([1, 3, 11, 5], |i| (i as f32 * 0.31).cos());
        let b = tensor([1, 3, 11, 5], |i| (i as f32 * 0.17).sin());
        let (l, g) = dct_loss(&a, &b).unwrap();
        assert!(l > 0.0);
        assert_eq!(g.shape(), [1, 3, 11, 5]);
    }

    #[test]
    fn confidence_weight_clipping() {
        let t = tensor([1, 3, 1, 1], |_| 0.5);
        // e = 0 -> exp(0) = 1 -> clipped to w_max
        let w = confidence_weights(&t, &t, CONF_GAMMA, CONF_W_MIN, CONF_W_MAX).unwrap();
        assert_eq!(w.data(), &[0.75]);

        // e = 0.2 -> exp(-2)
        let y = t.map(|v| v - 0.2);
        let w = confidence_weights(&t, &y, CONF_GAMMA, CONF_W_MIN, CONF_W_MAX).unwrap();
        assert!((f64::from(w.data()[0]) - (-2.0f64).exp()).abs() < 1e-6);

        // e = 0.5 -> exp(-5) ~ 0.0067 -> clipped to w_min
        let y = t.map(|v| v - 0.5);
        let w = confidence_weights(&t, &y, CONF_GAMMA, CONF_W_MIN, CONF_W_MAX).unwrap();
        assert_eq!(w.data(), &[0.10]);
    }

    #[test]
    fn kd_loss_uniform_weight() {
        let p = tensor([1, 3, 2, 2], |_| 0.6);
        let t = tensor([1, 3, 2, 2], |_| 0.5);
        let w = Tensor::filled([1, 1, 2, 2], 0.75);
        let (l, g) = kd_loss(&p, &t, &w).unwrap();
        assert!((l - 0.075).abs() < 1e-7);
        // doubling w doubles the gradient
        let w2 = Tensor::filled([1, 1, 2, 2], 1.5);
        let (_, g2) = kd_loss(&p, &t, &w2).unwrap();
        for (a, b) in g.data().iter().zip(g2.data()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stage_loss_composition_matches_manual_sum() {
        let pred = tensor([1, 3, 8, 8], |i| (i as f32 * 0.11).sin() * 0.4 + 0.5);
        let target = tensor([1, 3, 8, 8], |i| (i as f32 * 0.07).cos() * 0.4 + 0.5);
        let teacher = tensor([1, 3, 8, 8], |i| (i as f32 * 0.05).sin() * 0.4 + 0.5);

        let w = LossWeights::for_stage(Stage::Two, 0, 100);
        let (total, _) = stage_loss(Stage::Two, &pred, &target, Some(&teacher), &w).unwrap();

        let (lc, _) = charbonnier_loss(&pred, &target, w.eps_char).unwrap();
        let (ld, _) = dct_loss(&pred, &target).unwrap();
        let conf = confidence_weights(&teacher, &target, w.gamma, w.w_min, w.w_max).unwrap();
        let (lk, _) = kd_loss(&pred, &teacher, &conf).unwrap();
        let manual = lc + 0.02 * ld + 0.03 * lk;
        assert!((total - manual).abs() <= 1e-7, "{total} vs {manual}");
    }

    #[test]
    fn stage3_kd_weight_schedule() {
        let w0 = LossWeights::for_stage(Stage::Three, 0, 150);
        assert!((w0.w_kd - 0.03).abs() < 1e-7);
        let w_end = LossWeights::for_stage(Stage::Three, 149, 150);
        assert!((w_end.w_kd - 0.01).abs() < 1e-7);
        let w_mid = LossWeights::for_stage(Stage::Three, 74, 150);
        assert!(w_mid.w_kd < 0.03 && w_mid.w_kd > 0.01);
    }

    #[test]
    fn stage2_requires_teacher() {
        let a = tensor([1, 3, 4, 4], |_| 0.5);
        let w = LossWeights::for_stage(Stage::Two, 0, 10);
        assert!(stage_loss(Stage::Two, &a, &a, None, &w).is_err());
    }

    #[test]
    fn stage2_floor_when_everything_matches() {
        let a = tensor([1, 3, 8, 8], |_| 0.5);
        let w = LossWeights::for_stage(Stage::Two, 0, 10);
        let (l, _) = stage_loss(Stage::Two, &a, &a, Some(&a), &w).unwrap();
        assert!((l - 1e-3).abs() < 1e-9, "{l}");
    }
}
