//! Separable bicubic resampling with the a = -0.5 kernel, half-pixel
//! centered coordinates, and edge clamping. Used both to synthesize the
//! low-resolution images (÷3) and as the evaluation baseline (×3).

use super::Rgb8Image;

/// Cubic convolution kernel with a = -0.5 (linear precision: exact on
/// linear ramps, partition of unity on constants).
fn kernel(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Tap positions (clamped) and weights for one output coordinate.
fn taps(dst: usize, src_len: usize, scale: f64) -> ([usize; 4], [f64; 4]) {
    let sx = (dst as f64 + 0.5) * scale - 0.5;
    let base = sx.floor() as isize;
    let mut idx = [0usize; 4];
    let mut w = [0f64; 4];
    for i in 0..4 {
        let tap = base - 1 + i as isize;
        idx[i] = tap.clamp(0, src_len as isize - 1) as usize;
        w[i] = kernel(sx - tap as f64);
    }
    (idx, w)
}

/// Resizes one plane (row-major `h x w`) to `out_h x out_w`.
pub fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    // horizontal pass
    let sx = w as f64 / out_w as f64;
    let mut mid = vec![0f32; h * out_w];
    for ox in 0..out_w {
        let (idx, wt) = taps(ox, w, sx);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let mut acc = 0f64;
            for i in 0..4 {
                acc += wt[i] * f64::from(row[idx[i]]);
            }
            mid[y * out_w + ox] = acc as f32;
        }
    }
    // vertical pass
    let sy = h as f64 / out_h as f64;
    let mut out = vec![0f32; out_h * out_w];
    for oy in 0..out_h {
        let (idx, wt) = taps(oy, h, sy);
        for ox in 0..out_w {
            let mut acc = 0f64;
            for i in 0..4 {
                acc += wt[i] * f64::from(mid[idx[i] * out_w + ox]);
            }
            out[oy * out_w + ox] = acc as f32;
        }
    }
    out
}

/// Resizes an 8-bit image; output values round half-to-even and clamp.
pub fn bicubic_resize(img: &Rgb8Image, out_h: usize, out_w: usize) -> Rgb8Image {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0u8; 3 * out_h * out_w];
    for c in 0..3 {
        let plane: Vec<f32> = img.data[c * h * w..(c + 1) * h * w]
            .iter()
            .map(|&v| f32::from(v))
            .collect();
        let resized = resize_plane(&plane, h, w, out_h, out_w);
        for (o, v) in data[c * out_h * out_w..(c + 1) * out_h * out_w]
            .iter_mut()
            .zip(resized)
        {
            *o = f64::from(v).round_ties_even().clamp(0.0, 255.0) as u8;
        }
    }
    Rgb8Image {
        width: out_w,
        height: out_h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Rgb8Image {
            width: 9,
            height: 9,
            data: vec![137; 3 * 81],
        };
        let up = bicubic_resize(&img, 27, 27);
        assert!(up.data.iter().all(|&v| v == 137));
        let down = bicubic_resize(&img, 3, 3);
        assert!(down.data.iter().all(|&v| v == 137));
    }

    #[test]
    fn same_size_is_identity() {
        let img = Rgb8Image {
            width: 6,
            height: 5,
            data: (0..90).map(|i| (i * 11 % 256) as u8).collect(),
        };
        let same = bicubic_resize(&img, 5, 6);
        assert_eq!(img, same);
    }

    #[test]
    fn downscale_preserves_linear_ramp() {
        // horizontal ramp over 30 columns, downscaled by 3
        let w = 30;
        let h = 9;
        let mut data = vec![0u8; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = (x * 8) as u8;
                }
            }
        }
        let img = Rgb8Image {
            width: w,
            height: h,
            data,
        };
        let down = bicubic_resize(&img, 3, 10);
        // interior samples of a/3-downscaled ramp: value at half-pixel centers
        // is 8 * ((x + 0.5) * 3 - 0.5); edges deviate from clamping
        for y in 0..3 {
            for x in 1..9 {
                let expect = 8.0 * ((x as f64 + 0.5) * 3.0 - 0.5);
                let got = f64::from(down.data[y * 10 + x]);
                assert!((got - expect).abs() <= 1.0, "x={x}: {got} vs {expect}");
            }
        }
    }
}
