//! im2col-based 2D cross-correlation kernels.
//!
//! Inputs are `[N, C, H, W]`; kernels are `[k, k, C, F]` so that the kernel
//! buffer read as a `[k·k·C, F]` matrix multiplies the column matrix
//! directly. Column rows are ordered `(i, j, c)` to match.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernels.len() != 4 {
            return Err(Error::shape("conv2d", input, kernels));
        }
        let [batch, in_channels, height, width] = [input[0], input[1], input[2], input[3]];
        let [k, k2, m, filters] = [kernels[0], kernels[1], kernels[2], kernels[3]];
        if k != k2 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernels must be square, got {k}×{k2}"
            )));
        }
        if m != in_channels {
            return Err(Error::shape("conv2d", input, kernels));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let out_dim = |size: usize| -> Result<usize> {
            let span = size + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: ({size} + 2·{pad} − {k}) is not a non-negative multiple of stride {stride}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            kernel: k,
            filters,
            stride,
            pad,
            out_height: out_dim(height)?,
            out_width: out_dim(width)?,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_height, self.out_width]
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Source pixel for column row `(i, j, c)` at output position `(oy, ox)`.
    #[inline]
    fn source(&self, i: usize, j: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + i).checked_sub(self.pad)?;
        let x = (ox * self.stride + j).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let p = self.positions();
        let (k, c) = (self.kernel, self.in_channels);
        for i in 0..k {
            for j in 0..k {
                for ch in 0..c {
                    let row = ((i * k + j) * c + ch) * p;
                    let plane = &image[ch * self.height * self.width..];
                    for oy in 0..self.out_height {
                        for ox in 0..self.out_width {
                            cols[row + oy * self.out_width + ox] = match self.source(i, j, oy, ox) {
                                Some((y, x)) => plane[y * self.width + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let p = self.positions();
        let (k, c) = (self.kernel, self.in_channels);
        for i in 0..k {
            for j in 0..k {
                for ch in 0..c {
                    let row = ((i * k + j) * c + ch) * p;
                    let base = ch * self.height * self.width;
                    for oy in 0..self.out_height {
                        for ox in 0..self.out_width {
                            if let Some((y, x)) = self.source(i, j, oy, ox) {
                                image[base + y * self.width + x] +=
                                    cols[row + oy * self.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, input: &[T], kernels: &[T]) -> Vec<T> {
        let (kk, p, f) = (self.patch_len(), self.positions(), self.filters);
        let mut out = vec![T::zero(); self.batch * f * p];
        let mut cols = vec![T::zero(); kk * p];
        for b in 0..self.batch {
            self.im2col(&input[b * self.image_len()..(b + 1) * self.image_len()], &mut cols);
            // out_b[F, P] = Kᵀ[F, kk] · cols[kk, P]
            T::gemm(
                f,
                kk,
                p,
                kernels,
                true,
                &cols,
                false,
                T::zero(),
                &mut out[b * f * p..(b + 1) * f * p],
            );
        }
        out
    }

    /// Returns `(grad_input, grad_kernels)`; either may be skipped.
    pub(crate) fn backward<T: Scalar>(
        &self,
        input: &[T],
        kernels: &[T],
        grad_out: &[T],
        want_input: bool,
        want_kernels: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (kk, p, f) = (self.patch_len(), self.positions(), self.filters);
        let mut grad_in = want_input.then(|| vec![T::zero(); input.len()]);
        let mut grad_k = want_kernels.then(|| vec![T::zero(); kernels.len()]);
        let mut cols = vec![T::zero(); kk * p];
        let mut dcols = vec![T::zero(); kk * p];
        for b in 0..self.batch {
            let g = &grad_out[b * f * p..(b + 1) * f * p];
            if let Some(gk) = grad_k.as_mut() {
                self.im2col(&input[b * self.image_len()..(b + 1) * self.image_len()], &mut cols);
                // dK[kk, F] += cols[kk, P] · gᵀ[P, F]
                T::gemm(kk, p, f, &cols, false, g, true, T::one(), gk);
            }
            if let Some(gi) = grad_in.as_mut() {
                // dcols[kk, P] = K[kk, F] · g[F, P]
                T::gemm(kk, f, p, kernels, false, g, false, T::zero(), &mut dcols);
                self.col2im_add(
                    &dcols,
                    &mut gi[b * self.image_len()..(b + 1) * self.image_len()],
                );
            }
        }
        (grad_in, grad_k)
    }
}
