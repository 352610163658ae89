//! Same-padded 2-D cross-correlation via im2col + GEMM.
//!
//! Layouts are NCHW for activations and `[out, in, kh, kw]` for kernels. Zero
//! padding of `k / 2` on each side keeps the spatial extent unchanged.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn infer<F: Scalar>(
        input: &Tensor<F>,
        kernel: &Tensor<F>,
        bias: &Tensor<F>,
    ) -> Result<ConvGeometry> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-D input and kernel, got {is:?} and {ks:?}"
            )));
        }
        if is[1] != ks[1] {
            return Err(Error::Shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                is[1], ks[1]
            )));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel extents must be odd, got {}x{}",
                ks[2], ks[3]
            )));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::Shape(format!(
                "conv2d bias must have shape [{}], got {:?}",
                ks[0],
                bias.shape()
            )));
        }
        Ok(ConvGeometry {
            batch: is[0],
            in_channels: is[1],
            out_channels: ks[0],
            height: is[2],
            width: is[3],
            kh: ks[2],
            kw: ks[3],
        })
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.height, self.width]
    }
}

/// Unfolds one image `[C, H, W]` into `cols` of shape `[C*kh*kw, H*W]`.
fn im2col<F: Scalar>(g: &ConvGeometry, image: &[F], cols: &mut [F]) {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                for y in 0..h {
                    let dst = &mut out[y * w..(y + 1) * w];
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h || x0 >= x1 {
                        dst.fill(F::zero());
                        continue;
                    }
                    let sy = sy - ph;
                    dst[..x0].fill(F::zero());
                    dst[x1..].fill(F::zero());
                    let sx0 = x0 + dx - pw;
                    dst[x0..x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `image`.
fn col2im<F: Scalar>(g: &ConvGeometry, cols: &[F], image: &mut [F]) {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = pw.saturating_sub(dx);
                let x1 = (w + pw).saturating_sub(dx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + dy;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let sy = sy - ph;
                    let sx0 = x0 + dx - pw;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let g = ConvGeometry::infer(input, kernel, bias)?;
    let hw = g.pixels();
    let pl = g.patch_len();
    let mut out = vec![F::zero(); g.batch * g.out_channels * hw];
    let mut cols = vec![F::zero(); pl * hw];
    for b in 0..g.batch {
        let image = &input.data()[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        let dst = &mut out[b * g.out_channels * hw..(b + 1) * g.out_channels * hw];
        for (co, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(bias.data()[co]);
        }
        im2col(&g, image, &mut cols);
        F::gemm(
            g.out_channels,
            pl,
            hw,
            F::one(),
            kernel.data(),
            pl as isize,
            1,
            &cols,
            hw as isize,
            1,
            F::one(),
            dst,
            hw as isize,
            1,
        );
    }
    Tensor::new(g.output_shape(), out)
}

pub struct ConvGrads<F> {
    pub input: Tensor<F>,
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> Result<ConvGrads<F>> {
    let g = ConvGeometry::infer(input, kernel, bias)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(Error::Shape(format!(
            "conv2d output gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let hw = g.pixels();
    let pl = g.patch_len();
    let mut d_input = vec![F::zero(); input.len()];
    let mut d_kernel = vec![F::zero(); kernel.len()];
    let mut d_bias = vec![F::zero(); g.out_channels];
    let mut cols = vec![F::zero(); pl * hw];
    let mut d_cols = vec![F::zero(); pl * hw];
    for b in 0..g.batch {
        let image = &input.data()[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        let gout = &grad_out.data()[b * g.out_channels * hw..(b + 1) * g.out_channels * hw];
        for (co, row) in gout.chunks_exact(hw).enumerate() {
            d_bias[co] = row.iter().fold(d_bias[co], |acc, &v| acc + v);
        }
        im2col(&g, image, &mut cols);
        // dK += gout[Cout, HW] * cols^T[HW, CKK]
        F::gemm(
            g.out_channels,
            hw,
            pl,
            F::one(),
            gout,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            F::one(),
            &mut d_kernel,
            pl as isize,
            1,
        );
        // dcols = K^T[CKK, Cout] * gout[Cout, HW]
        F::gemm(
            pl,
            g.out_channels,
            hw,
            F::one(),
            kernel.data(),
            1,
            pl as isize,
            gout,
            hw as isize,
            1,
            F::zero(),
            &mut d_cols,
            hw as isize,
            1,
        );
        let dst = &mut d_input[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        col2im(&g, &d_cols, dst);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), d_input)?,
        kernel: Tensor::new(kernel.shape().to_vec(), d_kernel)?,
        bias: Tensor::new(vec![g.out_channels], d_bias)?,
    })
}
