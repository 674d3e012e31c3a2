//! Forward recording and reverse-mode gradients for the fixed op set.
//!
//! A [`Tape`] records every op applied during a forward pass together with its output.
//! [`Tape::backward`] then walks the records in reverse, accumulating exact gradients
//! for the convolution parameters and for every input node.

use super::conv::{conv2d_backward, conv2d_forward, LayerParams};
use super::hypercolumn::{hypercolumn_backward, hypercolumn_forward};
use super::loss::sigmoid;
use super::resize::{bilinear_resize, bilinear_resize_transpose};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Conv {
        x: NodeId,
        layer: usize,
        stride: usize,
        pad: usize,
        cols: Option<Vec<f64>>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Resize {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Hypercolumn {
        xs: Vec<NodeId>,
        layer: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(params: &LayerParams) -> Self {
        LayerGrads {
            kernel: vec![0.0; params.kernel.len()],
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &LayerGrads) {
        for (a, b) in self.kernel.iter_mut().zip(&other.kernel) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer of the parameter list given to `backward`.
    pub layers: Vec<LayerGrads>,
    /// Gradients of the input nodes, in the order they were added.
    pub inputs: Vec<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        NodeId(self.values.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Like [`Tape::input`], but no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(self.ops[id.0], Op::Constant)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        params: &[LayerParams],
        layer: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let p = params
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no parameters for layer {layer}")))?;
        let (out, cols) = conv2d_forward(self.value(x), p, stride, pad, true)?;
        Ok(self.push(
            Op::Conv {
                x,
                layer,
                stride,
                pad,
                cols,
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(Op::Relu { x }, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(Op::Sigmoid { x }, out)
    }

    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(Op::Resize { x }, out))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let [b, _, h, w] = self.value(*first).dims();
        let mut channels = 0;
        for &x in xs {
            let d = self.value(x).dims();
            if d[0] != b || d[2] != h || d[3] != w {
                return Err(Error::Config(format!(
                    "concat: dims {:?} incompatible with {:?}",
                    d,
                    self.value(*first).dims()
                )));
            }
            channels += d[1];
        }
        let mut out = Tensor::zeros([b, channels, h, w]);
        for bi in 0..b {
            let dst = out.sample_mut(bi);
            let mut offset = 0;
            for &x in xs {
                let src = self.values[x.0].sample(bi);
                dst[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, out))
    }

    /// Resizes every map to `out_h × out_w`, concatenates channels and applies the 1×1
    /// layer `layer`, computed without materializing the concatenation.
    pub fn hypercolumn_conv(
        &mut self,
        xs: &[NodeId],
        params: &[LayerParams],
        layer: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let p = params
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no parameters for layer {layer}")))?;
        let inputs: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let out = hypercolumn_forward(&inputs, p, out_h, out_w)?;
        Ok(self.push(Op::Hypercolumn { xs: xs.to_vec(), layer }, out))
    }

    /// Propagates `output_grad` (d loss / d output) back through the recorded ops.
    pub fn backward(&self, params: &[LayerParams], output: NodeId, output_grad: Tensor) -> Result<Gradients> {
        if self.ops.is_empty() || output.0 >= self.ops.len() {
            return Err(Error::Usage("backward called before a forward pass was recorded".into()));
        }
        if output_grad.dims() != self.value(output).dims() {
            return Err(Error::Config(format!(
                "backward: gradient dims {:?} do not match output dims {:?}",
                output_grad.dims(),
                self.value(output).dims()
            )));
        }
        let mut layers: Vec<LayerGrads> = params.iter().map(LayerGrads::zeros_like).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        grads[output.0] = Some(output_grad);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Input => grads[idx] = Some(g),
                Op::Constant => {}
                Op::Conv {
                    x,
                    layer,
                    stride,
                    pad,
                    cols,
                } => {
                    let need_input = self.needs_grad(*x);
                    let cg = conv2d_backward(
                        self.value(*x),
                        cols.as_deref(),
                        &params[*layer],
                        *stride,
                        *pad,
                        &g,
                        need_input,
                    )?;
                    layers[*layer].accumulate(&LayerGrads {
                        kernel: cg.kernel,
                        bias: cg.bias,
                    });
                    if let Some(input) = cg.input {
                        add_grad(&mut grads, *x, input);
                    }
                }
                Op::Relu { x } | Op::Sigmoid { x } | Op::Resize { x } if !self.needs_grad(*x) => {}
                Op::Relu { x } => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(self.values[idx].data()) {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(self.values[idx].data()) {
                        *gv *= y * (1.0 - y);
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::Resize { x } => {
                    let [_, _, h, w] = self.value(*x).dims();
                    add_grad(&mut grads, *x, bilinear_resize_transpose(&g, h, w)?);
                }
                Op::Hypercolumn { xs, layer } => {
                    let inputs: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
                    let hg = hypercolumn_backward(&inputs, &params[*layer], &g)?;
                    layers[*layer].accumulate(&LayerGrads {
                        kernel: hg.kernel,
                        bias: hg.bias,
                    });
                    for (&x, gx) in xs.iter().zip(hg.inputs) {
                        if self.needs_grad(x) {
                            add_grad(&mut grads, x, gx);
                        }
                    }
                }
                Op::Concat { xs } => {
                    let b = g.batch();
                    let mut offset = 0;
                    for &x in xs {
                        let dims = self.value(x).dims();
                        let per = dims[1] * dims[2] * dims[3];
                        let mut part = Tensor::zeros(dims);
                        for bi in 0..b {
                            part.sample_mut(bi).copy_from_slice(&g.sample(bi)[offset..offset + per]);
                        }
                        offset += per;
                        add_grad(&mut grads, x, part);
                    }
                }
            }
        }

        let inputs = self
            .ops
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Input))
            .map(|(i, _)| grads[i].take().unwrap_or_else(|| Tensor::zeros(self.values[i].dims())))
            .collect();
        Ok(Gradients { layers, inputs })
    }
}

fn add_grad(grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut grads[node.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let tape = Tape::new();
        let err = tape.backward(&[], NodeId(0), Tensor::zeros([1, 1, 1, 1])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn single_pointwise_conv_kernel_grad_is_input() {
        let mut params = LayerParams::zeros(1, 1, 1, 1);
        params.kernel.data_mut()[0] = 0.3;
        let params = vec![params];
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec([1, 1, 1, 1], vec![2.5]).unwrap());
        let y = tape.conv2d(x, &params, 0, 1, 0).unwrap();
        let g = tape.backward(&params, y, Tensor::filled([1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.layers[0].kernel, vec![2.5]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
        assert_eq!(g.inputs[0].data(), &[0.3]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut p = LayerParams::zeros(2, 1, 3, 3);
        p.kernel.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let params = vec![p];
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled([1, 1, 4, 4], 1.0));
        let c = tape.conv2d(x, &params, 0, 2, 1).unwrap();
        let r = tape.relu(c);
        let up = tape.resize(r, 4, 4).unwrap();
        let cat = tape.concat(&[up, x]).unwrap();
        let s = tape.sigmoid(cat);
        let g = tape.backward(&params, s, Tensor::zeros(tape.value(s).dims())).unwrap();
        assert!(g.layers[0].kernel.iter().chain(&g.layers[0].bias).all(|&v| v == 0.0));
        assert!(g.inputs[0].data().iter().all(|&v| v == 0.0));
    }
}
