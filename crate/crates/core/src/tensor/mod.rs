//! Dense rank-4 tensors in `(N, C, H, W)` layout and the forward/backward
//! operators the student network is built from.

mod ops;

pub mod gradcheck;

pub use ops::{
    add, batch_norm, batch_norm_grad, conv2d, conv2d_grad, pixel_shuffle, pixel_unshuffle, relu,
    relu_grad, BnCache, BnGrads, BnMode, ConvGrads,
};

use crate::error::{Error, Result};

/// Dense rank-4 tensor of 32-bit floats, row-major in `(N, C, H, W)` order,
/// with an optional same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid_argument(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let [_, cc, hh, ww] = self.shape;
        &mut self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating a zeroed one on first access.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    /// Adds `g` into the gradient buffer, allocating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad_mut();
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(0.0);
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

/// Parameters of a stride-1, same-padding square convolution.
///
/// `weight` is `(C_out, C_in, k, k)`, `bias` is `(C_out, 1, 1, 1)`.
/// The kernel size must be odd so `(k - 1) / 2` padding preserves the
/// spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros([c_out, c_in, k, k]),
            bias: Tensor::zeros([c_out, 1, 1, 1]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [c_out, _, kh, kw] = self.weight.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid_argument(format!(
                "kernel must be square with odd size, got {}x{}",
                kh, kw
            )));
        }
        if self.bias.shape() != [c_out, 1, 1, 1] {
            return Err(Error::invalid_argument(format!(
                "bias shape {:?} does not match {} output channels",
                self.bias.shape(),
                c_out
            )));
        }
        Ok(())
    }
}

/// Batch-normalization parameters and running statistics for `C` channels.
/// All per-channel buffers have shape `(C, 1, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BNParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
}

pub const BN_DEFAULT_EPS: f32 = 1e-5;
pub const BN_DEFAULT_MOMENTUM: f32 = 0.1;

impl BNParams {
    /// Identity-initialized statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        BNParams {
            gamma: Tensor::filled([channels, 1, 1, 1], 1.0),
            beta: Tensor::zeros([channels, 1, 1, 1]),
            running_mean: Tensor::zeros([channels, 1, 1, 1]),
            running_var: Tensor::filled([channels, 1, 1, 1], 1.0),
            eps: BN_DEFAULT_EPS,
            momentum: BN_DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c, 1, 1, 1] {
                return Err(Error::invalid_argument(format!(
                    "{} shape {:?} does not match {} channels",
                    name,
                    t.shape(),
                    c
                )));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid_state(
                "running variance has negative entries",
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid_argument(format!(
                "bn eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::from_vec([1, 2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 0), 2.0);
        assert_eq!(t.at(0, 1, 0, 1), 5.0);
        assert_eq!(t.at(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn grad_accumulates_and_clears() {
        let mut t = Tensor::zeros([1, 1, 1, 2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
