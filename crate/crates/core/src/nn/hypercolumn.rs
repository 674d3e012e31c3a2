//! Pointwise convolution over a hypercolumn of feature maps at different resolutions.
//!
//! Upsampling each map to a common size, concatenating channels and applying a 1×1 conv
//! is the same linear function as applying each map's slice of the 1×1 kernel at the
//! map's own resolution and upsampling the (narrower) products. The second order is far
//! cheaper for coarse maps, so that is what is computed here.

use super::conv::LayerParams;
use super::gemm::gemm;
use super::resize::PlaneResizer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(inputs: &[&Tensor], params: &LayerParams) -> Result<usize> {
    let total: usize = inputs.iter().map(|t| t.channels()).sum();
    let [_, in_ch, kh, kw] = params.kernel.dims();
    if in_ch != total || kh != 1 || kw != 1 {
        return Err(Error::Config(format!(
            "hypercolumn conv: kernel {:?} does not match {total} concatenated channels",
            params.kernel.dims()
        )));
    }
    let batch = inputs.first().map_or(0, |t| t.batch());
    if inputs.iter().any(|t| t.batch() != batch) {
        return Err(Error::Config("hypercolumn conv: batch sizes differ".into()));
    }
    Ok(batch)
}

/// Contiguous copy of the kernel columns `offset..offset + width`.
fn kernel_slice(params: &LayerParams, offset: usize, width: usize) -> Vec<f64> {
    let in_ch = params.in_channels();
    params
        .kernel
        .data()
        .chunks_exact(in_ch)
        .flat_map(|row| row[offset..offset + width].iter().copied())
        .collect()
}

pub(crate) fn hypercolumn_forward(inputs: &[&Tensor], params: &LayerParams, out_h: usize, out_w: usize) -> Result<Tensor> {
    let batch = check(inputs, params)?;
    let out_ch = params.out_channels();
    let mut out = Tensor::zeros([batch, out_ch, out_h, out_w]);
    let hw = out_h * out_w;
    for b in 0..batch {
        for (oc, plane) in out.sample_mut(b).chunks_exact_mut(hw).enumerate() {
            plane.fill(params.bias[oc]);
        }
    }
    let mut offset = 0;
    let mut narrow = Vec::new();
    for x in inputs {
        let [_, c, h, w] = x.dims();
        let weights = kernel_slice(params, offset, c);
        offset += c;
        let mut resizer = PlaneResizer::new(h, w, out_h, out_w)?;
        for b in 0..batch {
            if resizer.is_identity() {
                gemm(out_ch, c, hw, 1.0, &weights, false, x.sample(b), false, 1.0, out.sample_mut(b));
                continue;
            }
            narrow.resize(out_ch * h * w, 0.0);
            gemm(out_ch, c, h * w, 1.0, &weights, false, x.sample(b), false, 0.0, &mut narrow);
            for (src, dst) in narrow.chunks_exact(h * w).zip(out.sample_mut(b).chunks_exact_mut(hw)) {
                resizer.apply(src, dst, true);
            }
        }
    }
    Ok(out)
}

pub(crate) struct HypercolumnGrads {
    pub inputs: Vec<Tensor>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn hypercolumn_backward(
    inputs: &[&Tensor],
    params: &LayerParams,
    output_grad: &Tensor,
) -> Result<HypercolumnGrads> {
    let batch = check(inputs, params)?;
    let [gb, out_ch, out_h, out_w] = output_grad.dims();
    if gb != batch || out_ch != params.out_channels() {
        return Err(Error::Config(format!(
            "hypercolumn backward: gradient dims {:?} do not match the layer",
            output_grad.dims()
        )));
    }
    let in_ch = params.in_channels();
    let mut kernel = vec![0.0; params.kernel.len()];
    let mut bias = vec![0.0; out_ch];
    for b in 0..batch {
        for (oc, plane) in output_grad.sample(b).chunks_exact(out_h * out_w).enumerate() {
            bias[oc] += plane.iter().sum::<f64>();
        }
    }
    let mut input_grads = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    let mut narrow = Vec::new();
    for x in inputs {
        let [_, c, h, w] = x.dims();
        let weights = kernel_slice(params, offset, c);
        let mut resizer = PlaneResizer::new(h, w, out_h, out_w)?;
        let mut dw = vec![0.0; out_ch * c];
        let mut dx = Tensor::zeros(x.dims());
        for b in 0..batch {
            let g = output_grad.sample(b);
            let narrow_grad: &[f64] = if resizer.is_identity() {
                g
            } else {
                narrow.resize(out_ch * h * w, 0.0);
                for (src, dst) in g.chunks_exact(out_h * out_w).zip(narrow.chunks_exact_mut(h * w)) {
                    resizer.transpose(src, dst);
                }
                &narrow
            };
            gemm(out_ch, h * w, c, 1.0, narrow_grad, false, x.sample(b), true, 1.0, &mut dw);
            gemm(c, out_ch, h * w, 1.0, &weights, true, narrow_grad, false, 0.0, dx.sample_mut(b));
        }
        for (row, src) in kernel.chunks_exact_mut(in_ch).zip(dw.chunks_exact(c)) {
            row[offset..offset + c].copy_from_slice(src);
        }
        offset += c;
        input_grads.push(dx);
    }
    Ok(HypercolumnGrads {
        inputs: input_grads,
        kernel,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bilinear_resize, conv2d};

    fn filled(dims: [usize; 4], salt: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|i| ((i as f64 + salt) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn equals_upsample_concat_then_pointwise_conv() {
        let maps = [filled([2, 3, 8, 8], 0.0), filled([2, 4, 4, 4], 1.0), filled([2, 5, 2, 2], 2.0)];
        let mut params = LayerParams::zeros(6, 12, 1, 1);
        params.kernel = filled([6, 12, 1, 1], 3.0);
        params.bias = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6];

        let ups: Vec<Tensor> = maps.iter().map(|m| bilinear_resize(m, 8, 8).unwrap()).collect();
        let mut cat = Tensor::zeros([2, 12, 8, 8]);
        for b in 0..2 {
            let mut data = Vec::new();
            for u in &ups {
                data.extend_from_slice(u.sample(b));
            }
            cat.sample_mut(b).copy_from_slice(&data);
        }
        let direct = conv2d(&cat, &params, 1, 0).unwrap();
        let refs: Vec<&Tensor> = maps.iter().collect();
        let fused = hypercolumn_forward(&refs, &params, 8, 8).unwrap();
        for (a, b) in direct.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_width_mismatch_is_rejected() {
        let maps = [filled([1, 3, 4, 4], 0.0)];
        let params = LayerParams::zeros(2, 4, 1, 1);
        let refs: Vec<&Tensor> = maps.iter().collect();
        assert!(hypercolumn_forward(&refs, &params, 4, 4).is_err());
    }
}
