//! Bilinear resampling with half-pixel sample centres and edge clamping.
//!
//! Output pixel `x` samples the input at `(x + 0.5) * in / out - 0.5`, clamped to
//! `[0, in - 1]`. The map is separable and linear, so the backward pass is its exact
//! transpose: every forward tap scatters its weight back to the same source pixels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interpolation taps along one axis: output index -> (lower, upper, weight of upper).
#[derive(Debug, Clone)]
pub(crate) struct AxisTaps {
    taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let max = (in_len - 1) as f64;
        let taps = (0..out_len)
            .map(|x| {
                let src = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        AxisTaps { taps }
    }
}

fn check_target(input_h: usize, input_w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!(
            "bilinear resize: target {out_h}x{out_w} must be positive"
        )));
    }
    if input_h == 0 || input_w == 0 {
        return Err(Error::Config(format!(
            "bilinear resize: input {input_h}x{input_w} must be non-empty"
        )));
    }
    Ok(())
}

/// Reusable resampler between two fixed plane sizes.
#[derive(Debug, Clone)]
pub(crate) struct PlaneResizer {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ty: AxisTaps,
    tx: AxisTaps,
    rows: Vec<f64>,
}

impl PlaneResizer {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        check_target(in_h, in_w, out_h, out_w)?;
        Ok(PlaneResizer {
            in_h,
            in_w,
            out_h,
            out_w,
            ty: AxisTaps::new(in_h, out_h),
            tx: AxisTaps::new(in_w, out_w),
            rows: vec![0.0; in_h.max(out_h) * in_w.max(out_w)],
        })
    }

    /// `out (+)= R input`: horizontal pass over every input row, then vertical.
    pub fn apply(&mut self, input: &[f64], out: &mut [f64], accumulate: bool) {
        let (in_w, out_w) = (self.in_w, self.out_w);
        let rows = &mut self.rows[..self.in_h * out_w];
        for (src, dst) in input.chunks_exact(in_w).zip(rows.chunks_exact_mut(out_w)) {
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&self.tx.taps) {
                *d = src[x0] * (1.0 - fx) + src[x1] * fx;
            }
        }
        for (y, &(y0, y1, fy)) in self.ty.taps.iter().enumerate() {
            let lo = &rows[y0 * out_w..(y0 + 1) * out_w];
            let hi = &rows[y1 * out_w..(y1 + 1) * out_w];
            let dst = &mut out[y * out_w..(y + 1) * out_w];
            if accumulate {
                for ((d, &a), &b) in dst.iter_mut().zip(lo).zip(hi) {
                    *d += a * (1.0 - fy) + b * fy;
                }
            } else {
                for ((d, &a), &b) in dst.iter_mut().zip(lo).zip(hi) {
                    *d = a * (1.0 - fy) + b * fy;
                }
            }
        }
    }

    /// `input_grad = Rᵀ grad`, overwriting `input_grad`.
    pub fn transpose(&mut self, grad: &[f64], input_grad: &mut [f64]) {
        let (in_w, out_w) = (self.in_w, self.out_w);
        // Vertical transpose into `rows` (in_h × out_w), then horizontal transpose.
        let rows = &mut self.rows[..self.in_h * out_w];
        rows.fill(0.0);
        for (y, &(y0, y1, fy)) in self.ty.taps.iter().enumerate() {
            let src = &grad[y * out_w..(y + 1) * out_w];
            for (x, &g) in src.iter().enumerate() {
                rows[y0 * out_w + x] += g * (1.0 - fy);
                rows[y1 * out_w + x] += g * fy;
            }
        }
        input_grad.fill(0.0);
        for (src, dst) in rows.chunks_exact(out_w).zip(input_grad.chunks_exact_mut(in_w)) {
            for (&g, &(x0, x1, fx)) in src.iter().zip(&self.tx.taps) {
                dst[x0] += g * (1.0 - fx);
                dst[x1] += g * fx;
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.in_h, self.in_w) == (self.out_h, self.out_w)
    }
}

/// Resizes one row-major `in_h × in_w` plane into `out` (`out_h × out_w`).
pub fn resize_plane(
    input: &[f64],
    in_h: usize,
    in_w: usize,
    out: &mut [f64],
    out_h: usize,
    out_w: usize,
) -> Result<()> {
    PlaneResizer::new(in_h, in_w, out_h, out_w)?.apply(input, out, false);
    Ok(())
}

/// Bilinear resize of every (batch, channel) plane to `out_h × out_w`.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [b, c, h, w] = input.dims();
    let mut resizer = PlaneResizer::new(h, w, out_h, out_w)?;
    if resizer.is_identity() {
        return Ok(input.clone());
    }
    let mut out = Tensor::zeros([b, c, out_h, out_w]);
    for bi in 0..b {
        for ci in 0..c {
            resizer.apply(input.plane(bi, ci), out.plane_mut(bi, ci), false);
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_resize`]: maps a gradient at the output size back to the
/// input size `in_h × in_w`.
pub fn bilinear_resize_transpose(grad: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let [b, c, out_h, out_w] = grad.dims();
    let mut resizer = PlaneResizer::new(in_h, in_w, out_h, out_w)?;
    if resizer.is_identity() {
        return Ok(grad.clone());
    }
    let mut out = Tensor::zeros([b, c, in_h, in_w]);
    for bi in 0..b {
        for ci in 0..c {
            resizer.transpose(grad.plane(bi, ci), out.plane_mut(bi, ci));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_pixel_upsample_of_ramp() {
        let input = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_resize(&input, 4, 4).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn constants_stay_constant() {
        let input = Tensor::filled([1, 2, 5, 3], 0.7);
        for &(h, w) in &[(1, 1), (2, 9), (17, 4), (5, 3)] {
            let out = bilinear_resize(&input, h, w).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let input = Tensor::filled([1, 1, 2, 2], 1.0);
        assert!(matches!(bilinear_resize(&input, 0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn transpose_satisfies_adjoint_identity() {
        // <R a, g> == <a, R^T g> for every pair of sizes.
        for &(ih, iw, oh, ow) in &[(2, 2, 4, 4), (8, 8, 32, 32), (7, 5, 3, 11), (32, 32, 8, 8)] {
            let a = Tensor::from_vec([1, 1, ih, iw], (0..ih * iw).map(|i| (i as f64).sin()).collect()).unwrap();
            let g = Tensor::from_vec([1, 1, oh, ow], (0..oh * ow).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
            let ra = bilinear_resize(&a, oh, ow).unwrap();
            let rtg = bilinear_resize_transpose(&g, ih, iw).unwrap();
            let lhs: f64 = ra.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.data().iter().zip(rtg.data()).map(|(x, y)| x * y).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn resize_is_linear(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            ih in 1usize..9, iw in 1usize..9, oh in 1usize..13, ow in 1usize..13,
        ) {
            let gen = |salt: f64| -> Tensor {
                Tensor::from_vec([1, 1, ih, iw],
                    (0..ih * iw).map(|i| ((i as f64 + salt + seed as f64) * 1.7).sin()).collect()).unwrap()
            };
            let (a, b) = (gen(0.0), gen(100.0));
            let mix = Tensor::from_vec([1, 1, ih, iw],
                a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
            let lhs = bilinear_resize(&mix, oh, ow).unwrap();
            let (ra, rb) = (bilinear_resize(&a, oh, ow).unwrap(), bilinear_resize(&b, oh, ow).unwrap());
            for ((l, x), y) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
                let r = alpha * x + beta * y;
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }
    }
}
