//! 2-D cross-correlation with zero padding, via im2col and GEMM.

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel and bias of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// (out_ch, in_ch, kh, kw)
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Self {
        LayerParams {
            kernel: Tensor::zeros([out_ch, in_ch, kh, kw]),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel.dims()[2], self.kernel.dims()[3])
    }

    pub fn num_values(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Static geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<Self> {
        let [_, in_ch, in_h, in_w] = input.dims();
        let (kh, kw) = params.kernel_size();
        if params.in_channels() != in_ch {
            return Err(Error::Config(format!(
                "conv2d: input has {in_ch} channels but kernel {:?} expects {}",
                params.kernel.dims(),
                params.in_channels()
            )));
        }
        if params.bias.len() != params.out_channels() {
            return Err(Error::Config(format!(
                "conv2d: bias length {} does not match {} output channels",
                params.bias.len(),
                params.out_channels()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let padded_h = in_h + 2 * pad;
        let padded_w = in_w + 2 * pad;
        if padded_h < kh || padded_w < kw || kh == 0 || kw == 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {in_h}x{in_w} with pad {pad}"
            )));
        }
        Ok(ConvGeometry {
            in_ch,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, input: &[f64], col: &mut [f64]) {
        let n = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], input_grad: &mut [f64]) {
        let n = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &mut input_grad[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst_row[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, for non-pointwise kernels, the
/// im2col buffers of every batch entry (reused by the backward pass).
pub(crate) fn conv2d_forward(
    input: &Tensor,
    params: &LayerParams,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let g = ConvGeometry::new(input, params, stride, pad)?;
    let batch = input.batch();
    let out_ch = params.out_channels();
    let (rows, n) = (g.col_rows(), g.out_pixels());
    let mut output = Tensor::zeros([batch, out_ch, g.out_h, g.out_w]);
    let mut cols = if keep_cols && !g.is_pointwise() {
        Some(vec![0.0; batch * rows * n])
    } else {
        None
    };
    let mut scratch = if cols.is_none() && !g.is_pointwise() {
        vec![0.0; rows * n]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let out = output.sample_mut(b);
        for (oc, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.fill(params.bias[oc]);
        }
        let col: &[f64] = if g.is_pointwise() {
            input.sample(b)
        } else {
            let buf = match cols.as_mut() {
                Some(all) => &mut all[b * rows * n..(b + 1) * rows * n],
                None => &mut scratch[..],
            };
            g.im2col(input.sample(b), buf);
            buf
        };
        gemm(out_ch, rows, n, 1.0, params.kernel.data(), false, col, false, 1.0, out);
    }
    Ok((output, cols))
}

/// Gradients of one convolution call.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    cols: Option<&[f64]>,
    params: &LayerParams,
    stride: usize,
    pad: usize,
    output_grad: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, params, stride, pad)?;
    let batch = input.batch();
    let out_ch = params.out_channels();
    let (rows, n) = (g.col_rows(), g.out_pixels());
    if output_grad.dims() != [batch, out_ch, g.out_h, g.out_w] {
        return Err(Error::Config(format!(
            "conv2d backward: output gradient dims {:?} do not match {:?}",
            output_grad.dims(),
            [batch, out_ch, g.out_h, g.out_w]
        )));
    }
    let mut kernel_grad = vec![0.0; params.kernel.len()];
    let mut bias_grad = vec![0.0; out_ch];
    let mut input_grad = need_input_grad.then(|| Tensor::zeros(input.dims()));
    let mut scratch = Vec::new();
    let mut dcol = if g.is_pointwise() || !need_input_grad {
        Vec::new()
    } else {
        vec![0.0; rows * n]
    };
    for b in 0..batch {
        let dout = output_grad.sample(b);
        for (oc, plane) in dout.chunks_exact(n).enumerate() {
            bias_grad[oc] += plane.iter().sum::<f64>();
        }
        let col: &[f64] = if g.is_pointwise() {
            input.sample(b)
        } else if let Some(all) = cols {
            &all[b * rows * n..(b + 1) * rows * n]
        } else {
            scratch.resize(rows * n, 0.0);
            g.im2col(input.sample(b), &mut scratch);
            &scratch
        };
        gemm(out_ch, n, rows, 1.0, dout, false, col, true, 1.0, &mut kernel_grad);
        let Some(input_grad) = input_grad.as_mut() else { continue };
        if g.is_pointwise() {
            gemm(rows, out_ch, n, 1.0, params.kernel.data(), true, dout, false, 0.0, input_grad.sample_mut(b));
        } else {
            gemm(rows, out_ch, n, 1.0, params.kernel.data(), true, dout, false, 0.0, &mut dcol);
            g.col2im(&dcol, input_grad.sample_mut(b));
        }
    }
    Ok(ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    })
}

/// Cross-correlation of `input` with `params`, zero-padded by `pad` on every side.
pub fn conv2d(input: &Tensor, params: &LayerParams, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_forward(input, params, stride, pad, false).map(|(out, _)| out)
}
