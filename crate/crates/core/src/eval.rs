//! Full-image RGB PSNR, Gaussian-window SSIM, and dataset-level metric
//! reports across the float, fake-quant, integer, and bicubic paths.
//!
//! Metrics are computed on the exportable 8-bit prediction: outputs are
//! clamped to `[0, 1]` and rounded to uint8 (half-even) before comparison,
//! matching what deployment would actually ship.

use crate::data::{bicubic_resize, Dataset, Rgb8Image};
use crate::error::{Error, Result};
use crate::model::DeployModel;
use crate::quant::{integer_infer, simulate_fake_quant, DeployGraph, QatModel};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// PSNR ceiling reported for identical images, keeping reports finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Full-image RGB PSNR in dB over normalized `[0, 1]` tensors, peak 1.0,
/// no border shaving.
pub fn psnr_rgb(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_argument(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut se = 0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = f64::from(*x) - f64::from(*y);
        se += d * d;
    }
    let mse = se / a.numel() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-region Gaussian filter of one plane.
fn blur_valid(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let k = SSIM_WINDOW;
    let ow = w - k + 1;
    let mut mid = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                acc += win[i] * src[y * w + x + i];
            }
            mid[y * ow + x] = acc;
        }
    }
    let oh = h - k + 1;
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                acc += win[i] * mid[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over the valid (unpadded) region of each channel, then over
/// channels. Constants C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_argument(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_argument(format!(
            "ssim needs images at least {SSIM_WINDOW} pixels per side, got {h}x{w}"
        )));
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let plane = h * w;
    let mut total = 0f64;
    for ni in 0..n {
        for ci in 0..c {
            let xa: Vec<f64> = a.data()[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let xb: Vec<f64> = b.data()[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let sq_a: Vec<f64> = xa.iter().map(|v| v * v).collect();
            let sq_b: Vec<f64> = xb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();

            let mu_a = blur_valid(&xa, h, w);
            let mu_b = blur_valid(&xb, h, w);
            let e_a2 = blur_valid(&sq_a, h, w);
            let e_b2 = blur_valid(&sq_b, h, w);
            let e_ab = blur_valid(&ab, h, w);

            let mut sum = 0f64;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_a2[i] - ma * ma;
                let vb = e_b2[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            }
            total += sum / mu_a.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}

/// Which inference path a report measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Fp32,
    FakeQuant,
    Int8,
    Bicubic,
}

impl EvalMode {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::Fp32 => "fp32",
            EvalMode::FakeQuant => "fakequant",
            EvalMode::Int8 => "int8",
            EvalMode::Bicubic => "bicubic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(EvalMode::Fp32),
            "fakequant" => Ok(EvalMode::FakeQuant),
            "int8" => Ok(EvalMode::Int8),
            "bicubic" => Ok(EvalMode::Bicubic),
            other => Err(Error::invalid_argument(format!(
                "unknown eval mode '{other}' (expected fp32 | fakequant | int8 | bicubic)"
            ))),
        }
    }
}

/// The model (or baseline) behind an evaluation.
pub enum EvalSubject<'a> {
    Deploy(&'a DeployModel),
    Qat(&'a QatModel),
    Graph(&'a DeployGraph),
    Bicubic,
}

impl EvalSubject<'_> {
    /// Produces the uint8 ×3 prediction for one LR image.
    pub fn predict(&self, lr: &Rgb8Image, mode: EvalMode) -> Result<Rgb8Image> {
        match (self, mode) {
            (EvalSubject::Bicubic, EvalMode::Bicubic) => {
                Ok(bicubic_resize(lr, 3 * lr.height, 3 * lr.width))
            }
            (EvalSubject::Deploy(m), EvalMode::Fp32) => {
                Rgb8Image::from_tensor(&m.infer(&lr.to_tensor())?)
            }
            (EvalSubject::Qat(q), EvalMode::FakeQuant) => {
                Rgb8Image::from_tensor(&q.infer(&lr.to_tensor())?)
            }
            (EvalSubject::Graph(g), EvalMode::FakeQuant) => {
                let y = simulate_fake_quant(g, &lr.to_tensor())?;
                Rgb8Image::from_tensor(&y.map(|v| v.clamp(0.0, 1.0)))
            }
            (EvalSubject::Graph(g), EvalMode::Int8) => {
                let xq = g.quantize_input(&lr.to_tensor());
                let yq = integer_infer(g, &xq)?;
                let y = g.dequantize_output(&yq)?;
                Rgb8Image::from_tensor(&y.map(|v| v.clamp(0.0, 1.0)))
            }
            _ => Err(Error::invalid_argument(format!(
                "eval mode '{}' does not match the provided model kind",
                mode.label()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics and their arithmetic means for one inference path.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub rows: Vec<MetricRow>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(mode: EvalMode, rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid_argument("metric report needs at least one image"));
        }
        let n = rows.len() as f64;
        let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(MetricReport {
            mode,
            rows,
            mean_psnr_db,
            mean_ssim,
        })
    }

    pub const CSV_HEADER: &'static str = "image_id,path,psnr_db,ssim";

    /// CSV: one row per image plus a `__mean__` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.id,
                self.mode.label(),
                r.psnr_db,
                r.ssim
            ));
        }
        out.push_str(&format!(
            "__mean__,{},{:.6},{:.6}\n",
            self.mode.label(),
            self.mean_psnr_db,
            self.mean_ssim
        ));
        out
    }
}

/// Evaluates one inference path over every pair in the dataset on full
/// images (no cropping). Per-image work runs in parallel; the report
/// order follows the dataset order.
pub fn evaluate(subject: &EvalSubject, dataset: &Dataset, mode: EvalMode) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("cannot evaluate an empty dataset"));
    }
    let eval_one = |pair: &crate::data::ImagePair| -> Result<MetricRow> {
        let pred = subject.predict(&pair.lr, mode)?;
        let pt = pred.to_tensor();
        let ht = pair.hr.to_tensor();
        Ok(MetricRow {
            id: pair.id.clone(),
            psnr_db: psnr_rgb(&pt, &ht)?,
            ssim: ssim(&pt, &ht)?,
        })
    };

    #[cfg(feature = "parallel")]
    let rows: Result<Vec<MetricRow>> = dataset.pairs.par_iter().map(eval_one).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Result<Vec<MetricRow>> = dataset.pairs.iter().map(eval_one).collect();

    MetricReport::from_rows(mode, rows?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: [usize; 4], f: impl Fn(usize) -> f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = tensor([1, 3, 4, 4], |i| (i as f32 * 0.02).fract());
        assert_eq!(psnr_rgb(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = tensor([1, 3, 8, 8], |_| 0.5);
        let b = a.map(|v| v + 1.0 / 255.0);
        let p = psnr_rgb(&a, &b).unwrap();
        let expect = 20.0 * 255f64.log10();
        assert!((p - expect).abs() < 1e-6, "{p} vs {expect}");

        // half the pixels differ by 2/255: MSE = 2 / 255^2
        let n = a.numel();
        let mut c = a.clone();
        for i in 0..n / 2 {
            c.data_mut()[i] += 2.0 / 255.0;
        }
        let p = psnr_rgb(&a, &c).unwrap();
        let expect = 10.0 * (255.0f64 * 255.0 / 2.0).log10();
        assert!((p - expect).abs() < 1e-4, "{p} vs {expect}");
        assert!((p - 45.12).abs() < 0.01);
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let a = tensor([1, 3, 6, 6], |i| (i as f32 * 0.013).fract());
        let b = a.map(|v| (v + 0.05).min(1.0));
        assert_eq!(psnr_rgb(&a, &b).unwrap(), psnr_rgb(&b, &a).unwrap());
        let c = a.map(|v| (v + 0.1).min(1.0));
        assert!(psnr_rgb(&a, &c).unwrap() < psnr_rgb(&a, &b).unwrap());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = tensor([1, 3, 16, 16], |i| (i as f32 * 0.037).fract());
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        // binary checkerboard against its inverse
        let a = tensor([1, 1, 16, 16], |i| {
            let (y, x) = (i / 16, i % 16);
            ((x / 2 + y / 2) % 2) as f32
        });
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn ssim_constant_images_match_scalar_oracle() {
        // constant a = 0.5, b = 0.5 + delta: variance terms vanish, so
        // ssim = (2 mu_a mu_b + C1)(C2) / ((mu_a^2 + mu_b^2 + C1)(C2))
        let delta = 0.02f64;
        let a = tensor([1, 1, 12, 12], |_| 0.5);
        let b = tensor([1, 1, 12, 12], |_| 0.5 + delta as f32);
        let s = ssim(&a, &b).unwrap();
        let (ma, mb) = (0.5f64, 0.5 + delta);
        let c1 = 0.0001f64;
        let oracle = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((s - oracle).abs() <= 1e-6, "{s} vs {oracle}");
    }

    #[test]
    fn ssim_brightness_shift_nearly_invariant() {
        let a = tensor([1, 1, 16, 16], |i| 0.3 + 0.3 * ((i as f32 * 0.2).sin() * 0.5 + 0.5));
        let b = a.map(|v| v + 0.1);
        let s_aa = ssim(&a, &a).unwrap();
        let s_shift = ssim(&a.map(|v| v + 0.1), &b).unwrap();
        assert!((s_aa - s_shift).abs() <= 1e-3);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = tensor([1, 1, 8, 8], |_| 0.5);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_means_recompute_exactly() {
        let rows = vec![
            MetricRow {
                id: "a".into(),
                psnr_db: 30.0,
                ssim: 0.9,
            },
            MetricRow {
                id: "b".into(),
                psnr_db: 40.0,
                ssim: 0.8,
            },
        ];
        let report = MetricReport::from_rows(EvalMode::Bicubic, rows).unwrap();
        let mean: f64 = report.rows.iter().map(|r| r.psnr_db).sum::<f64>() / 2.0;
        assert!((report.mean_psnr_db - mean).abs() <= 1e-9);
        let csv = report.to_csv();
        assert!(csv.starts_with("image_id,path,psnr_db,ssim\n"));
        assert!(csv.contains("__mean__,bicubic,35.000000,0.850000"));
    }

    #[test]
    fn bicubic_mode_equals_manual_composition() {
        let pairs =
            crate::data::make_synthetic_dataset(crate::data::SynthKind::GaussianBlobs, 2, 48, 3)
                .unwrap();
        let ds = Dataset::new(pairs).unwrap();
        let report = evaluate(&EvalSubject::Bicubic, &ds, EvalMode::Bicubic).unwrap();
        for (pair, row) in ds.pairs.iter().zip(&report.rows) {
            let up = bicubic_resize(&pair.lr, pair.hr.height, pair.hr.width);
            let p = psnr_rgb(&up.to_tensor(), &pair.hr.to_tensor()).unwrap();
            assert_eq!(p, row.psnr_db);
        }
    }
}
