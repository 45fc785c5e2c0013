//! Procedural desk-scale datasets: deterministic per seed, HR generated
//! directly, LR synthesized with the ÷3 bicubic kernel.

use super::{bicubic::bicubic_resize, ImagePair, Rgb8Image};
use crate::dct::{idct2_block, BLOCK};
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Gradients,
    Checkerboards,
    GaussianBlobs,
    BandLimitedNoise,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(SynthKind::Gradients),
            "checkerboards" => Ok(SynthKind::Checkerboards),
            "gaussian-blobs" => Ok(SynthKind::GaussianBlobs),
            "band-limited-noise" => Ok(SynthKind::BandLimitedNoise),
            other => Err(Error::invalid_argument(format!(
                "unknown dataset kind '{other}' (expected gradients | checkerboards | gaussian-blobs | band-limited-noise)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::Gradients => "gradients",
            SynthKind::Checkerboards => "checkerboards",
            SynthKind::GaussianBlobs => "gaussian-blobs",
            SynthKind::BandLimitedNoise => "band-limited-noise",
        }
    }
}

/// Highest DCT frequency index (per axis) populated by the band-limited
/// generator: coefficients with `max(u, v) > BAND_CUTOFF` stay zero.
pub const BAND_CUTOFF: usize = 3;

fn gradient_planes(rng: &mut ChaCha8Rng, size: usize) -> Vec<Vec<f32>> {
    (0..3)
        .map(|_| {
            let a = rng.gen::<f32>() * 2.0 - 1.0;
            let b = rng.gen::<f32>() * 2.0 - 1.0;
            let lo = 20.0 + rng.gen::<f32>() * 60.0;
            let hi = 180.0 + rng.gen::<f32>() * 60.0;
            let norm = (a.abs() + b.abs()).max(1e-6) * size as f32;
            let mut plane = vec![0f32; size * size];
            for y in 0..size {
                for x in 0..size {
                    let t = (a * x as f32 + b * y as f32) / norm * 0.5 + 0.5;
                    plane[y * size + x] = lo + (hi - lo) * t;
                }
            }
            plane
        })
        .collect()
}

fn checkerboard_planes(rng: &mut ChaCha8Rng, size: usize) -> Vec<Vec<f32>> {
    let cell = *[4usize, 6, 8, 9, 12]
        .get(rng.gen_range(0..5))
        .unwrap();
    let ox = rng.gen_range(0..cell);
    let oy = rng.gen_range(0..cell);
    let color_a: Vec<f32> = (0..3).map(|_| rng.gen_range(0.0..110.0)).collect();
    let color_b: Vec<f32> = (0..3).map(|_| rng.gen_range(145.0..255.0)).collect();
    (0..3)
        .map(|c| {
            let mut plane = vec![0f32; size * size];
            for y in 0..size {
                for x in 0..size {
                    let parity = (((x + ox) / cell) + ((y + oy) / cell)) % 2;
                    plane[y * size + x] = if parity == 0 { color_a[c] } else { color_b[c] };
                }
            }
            plane
        })
        .collect()
}

fn blob_planes(rng: &mut ChaCha8Rng, size: usize) -> Vec<Vec<f32>> {
    let background: Vec<f32> = (0..3).map(|_| rng.gen_range(40.0..215.0)).collect();
    let count = rng.gen_range(3..=8);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..count)
        .map(|_| {
            let cx = rng.gen::<f32>() * size as f32;
            let cy = rng.gen::<f32>() * size as f32;
            let sigma = size as f32 / 16.0 + rng.gen::<f32>() * size as f32 / 8.0;
            let amp = [
                (rng.gen::<f32>() * 2.0 - 1.0) * 120.0,
                (rng.gen::<f32>() * 2.0 - 1.0) * 120.0,
                (rng.gen::<f32>() * 2.0 - 1.0) * 120.0,
            ];
            (cx, cy, sigma, amp)
        })
        .collect();
    (0..3)
        .map(|c| {
            let mut plane = vec![background[c]; size * size];
            for &(cx, cy, sigma, amp) in &blobs {
                let inv = 1.0 / (2.0 * sigma * sigma);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        plane[y * size + x] += amp[c] * (-d2 * inv).exp();
                    }
                }
            }
            plane
        })
        .collect()
}

/// One band-limited float plane built from independent 8x8 blocks whose
/// DCT coefficients above [`BAND_CUTOFF`] are exactly zero.
pub fn band_limited_plane(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let blocks = size.div_ceil(BLOCK);
    let padded = blocks * BLOCK;
    let mut plane = vec![0f32; padded * padded];
    for by in 0..blocks {
        for bx in 0..blocks {
            let mut coeffs = [0f32; BLOCK * BLOCK];
            for u in 0..=BAND_CUTOFF {
                for v in 0..=BAND_CUTOFF {
                    let amp = if (u, v) == (0, 0) { 400.0 } else { 60.0 };
                    coeffs[u * BLOCK + v] = 1000.0 + (rng.gen::<f32>() * 2.0 - 1.0) * amp;
                }
            }
            coeffs[0] = 1000.0 + (rng.gen::<f32>() * 2.0 - 1.0) * 400.0;
            let spatial = idct2_block(&coeffs);
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    plane[(by * BLOCK + i) * padded + bx * BLOCK + j] = spatial[i * BLOCK + j];
                }
            }
        }
    }
    // crop to requested size
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        out[y * size..(y + 1) * size].copy_from_slice(&plane[y * padded..y * padded + size]);
    }
    out
}

fn band_limited_planes(rng: &mut ChaCha8Rng, size: usize) -> Vec<Vec<f32>> {
    (0..3)
        .map(|_| {
            let plane = band_limited_plane(rng, size);
            // affine rescale into the image range; scaling and shifting only
            // touch the DC coefficient, so the band limit is preserved
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &v in &plane {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-6);
            plane
                .iter()
                .map(|&v| 10.0 + (v - lo) / span * 235.0)
                .collect()
        })
        .collect()
}

fn planes_to_image(planes: Vec<Vec<f32>>, size: usize) -> Rgb8Image {
    let mut data = vec![0u8; 3 * size * size];
    for (c, plane) in planes.into_iter().enumerate() {
        for (o, v) in data[c * size * size..(c + 1) * size * size]
            .iter_mut()
            .zip(plane)
        {
            *o = f64::from(v).round_ties_even().clamp(0.0, 255.0) as u8;
        }
    }
    Rgb8Image {
        width: size,
        height: size,
        data,
    }
}

/// Generates `n` HR/LR pairs of `size x size` HR images (size must be a
/// multiple of 3). Deterministic for a given seed.
pub fn make_synthetic_dataset(
    kind: SynthKind,
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    if size < 24 || size % 3 != 0 {
        return Err(Error::invalid_argument(format!(
            "synthetic HR size must be a multiple of 3 and at least 24, got {size}"
        )));
    }
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derive_rng(seed, "synth", i as u64);
        let planes = match kind {
            SynthKind::Gradients => gradient_planes(&mut rng, size),
            SynthKind::Checkerboards => checkerboard_planes(&mut rng, size),
            SynthKind::GaussianBlobs => blob_planes(&mut rng, size),
            SynthKind::BandLimitedNoise => band_limited_planes(&mut rng, size),
        };
        let hr = planes_to_image(planes, size);
        let lr = bicubic_resize(&hr, size / 3, size / 3);
        pairs.push(ImagePair {
            id: format!("{}_{i:03}", kind.name()),
            hr,
            lr,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::dct2_block;

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_dataset(SynthKind::Checkerboards, 3, 48, 9).unwrap();
        let b = make_synthetic_dataset(SynthKind::Checkerboards, 3, 48, 9).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(SynthKind::Checkerboards, 3, 48, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dimension_invariant() {
        for kind in [
            SynthKind::Gradients,
            SynthKind::Checkerboards,
            SynthKind::GaussianBlobs,
            SynthKind::BandLimitedNoise,
        ] {
            let pairs = make_synthetic_dataset(kind, 2, 48, 5).unwrap();
            for p in &pairs {
                assert_eq!(p.hr.width, 3 * p.lr.width);
                assert_eq!(p.hr.height, 3 * p.lr.height);
            }
        }
    }

    #[test]
    fn band_limited_plane_has_no_energy_above_cutoff() {
        let mut rng = derive_rng(3, "synth-test", 0);
        let plane = band_limited_plane(&mut rng, 48);
        for by in 0..6 {
            for bx in 0..6 {
                let mut block = [0f32; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        block[i * 8 + j] = plane[(by * 8 + i) * 48 + bx * 8 + j];
                    }
                }
                let coeffs = dct2_block(&block);
                for u in 0..8 {
                    for v in 0..8 {
                        if u > BAND_CUTOFF || v > BAND_CUTOFF {
                            assert!(
                                coeffs[u * 8 + v].abs() <= 1e-3,
                                "block ({by},{bx}) coeff ({u},{v}) = {}",
                                coeffs[u * 8 + v]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn band_limited_u8_leakage_is_bounded_by_rounding() {
        let pairs = make_synthetic_dataset(SynthKind::BandLimitedNoise, 1, 48, 11).unwrap();
        let hr = &pairs[0].hr;
        for c in 0..3 {
            for by in 0..6 {
                for bx in 0..6 {
                    let mut block = [0f32; 64];
                    for i in 0..8 {
                        for j in 0..8 {
                            block[i * 8 + j] =
                                f32::from(hr.data[c * 48 * 48 + (by * 8 + i) * 48 + bx * 8 + j]);
                        }
                    }
                    let coeffs = dct2_block(&block);
                    for u in 0..8 {
                        for v in 0..8 {
                            if u > BAND_CUTOFF || v > BAND_CUTOFF {
                                // u8 rounding perturbs each pixel by <= 0.5,
                                // so any coefficient moves by at most
                                // ||E||_F <= sqrt(64 * 0.25) = 4
                                assert!(
                                    coeffs[u * 8 + v].abs() <= 4.0,
                                    "coeff ({u},{v}) = {}",
                                    coeffs[u * 8 + v]
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}
