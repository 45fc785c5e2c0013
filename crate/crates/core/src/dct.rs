//! Orthonormal 8x8 type-II DCT used by the frequency loss and the
//! band-limited synthetic image generator.

pub const BLOCK: usize = 8;

/// Orthonormal DCT-II basis matrix, row k = basis vector of frequency k.
fn basis() -> [[f64; BLOCK]; BLOCK] {
    let n = BLOCK as f64;
    let mut c = [[0f64; BLOCK]; BLOCK];
    for (k, row) in c.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos();
        }
    }
    c
}

fn matmul_basis(
    x: &[f32; BLOCK * BLOCK],
    left_transposed: bool,
    right_transposed: bool,
) -> [f32; BLOCK * BLOCK] {
    let c = basis();
    // tmp = L * X, out = tmp * R^T where L and R are the (possibly
    // transposed) basis.
    let mut tmp = [0f64; BLOCK * BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let mut s = 0f64;
            for k in 0..BLOCK {
                let l = if left_transposed { c[k][i] } else { c[i][k] };
                s += l * f64::from(x[k * BLOCK + j]);
            }
            tmp[i * BLOCK + j] = s;
        }
    }
    let mut out = [0f32; BLOCK * BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let mut s = 0f64;
            for k in 0..BLOCK {
                let r = if right_transposed { c[k][j] } else { c[j][k] };
                s += tmp[i * BLOCK + k] * r;
            }
            out[i * BLOCK + j] = s as f32;
        }
    }
    out
}

/// 2-D orthonormal DCT-II of one 8x8 block: `C * X * C^T`.
pub fn dct2_block(block: &[f32; BLOCK * BLOCK]) -> [f32; BLOCK * BLOCK] {
    matmul_basis(block, false, false)
}

/// Inverse of [`dct2_block`]: `C^T * Y * C` (the transpose, by orthonormality).
pub fn idct2_block(coeffs: &[f32; BLOCK * BLOCK]) -> [f32; BLOCK * BLOCK] {
    matmul_basis(coeffs, true, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_block_has_dc_only() {
        let x = [1.0f32; 64];
        let y = dct2_block(&x);
        assert!((y[0] - 8.0).abs() < 1e-6, "DC {}", y[0]);
        for (i, v) in y.iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-6, "AC coefficient {i} = {v}");
        }
    }

    #[test]
    fn roundtrip_and_parseval() {
        let mut x = [0f32; 64];
        for (i, v) in x.iter_mut().enumerate() {
            *v = ((i as f32) * 0.917).sin();
        }
        let y = dct2_block(&x);
        let back = idct2_block(&y);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-5, "roundtrip {a} vs {b}");
        }
        let ex: f64 = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        let ey: f64 = y.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        assert!((ex.sqrt() - ey.sqrt()).abs() <= 1e-5, "parseval {ex} vs {ey}");
    }
}
