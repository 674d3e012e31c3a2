//! The segmentation network: input encoding, hypercolumn forward pass, initialization.
//!
//! Layout of the parameter list: one entry per stride-`s` conv block, then the 1×1
//! hypercolumn layer, then the 1×1 output layer. Every block's activation is resized to
//! the heatmap resolution and the results are concatenated channel-wise before the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::nn::{self, Differentiable, LayerParams, NodeId, Tape};
use crate::tensor::Tensor;

/// Number of colour channels in a patch.
pub const IMAGE_CHANNELS: usize = 3;

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub patch_size: usize,
    pub heatmap_size: usize,
    pub num_categories: usize,
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub kernel_size: usize,
    pub head_width: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            patch_size: 64,
            heatmap_size: 32,
            num_categories: 4,
            block_channels: vec![16, 32, 64],
            block_strides: vec![2, 2, 2],
            kernel_size: 3,
            head_width: 64,
        }
    }
}

impl ArchDescriptor {
    /// Small variant used for finite-difference checks (well under 1e4 parameters).
    pub fn reduced_for_gradcheck(&self) -> Self {
        ArchDescriptor {
            patch_size: 16,
            heatmap_size: 8,
            num_categories: self.num_categories,
            block_channels: vec![4, 8, 16],
            block_strides: self.block_strides.clone(),
            kernel_size: self.kernel_size,
            head_width: 16,
        }
    }

    pub fn input_channels(&self) -> usize {
        IMAGE_CHANNELS + self.num_categories
    }

    pub fn pad(&self) -> usize {
        self.kernel_size / 2
    }

    /// Spatial size of each block's output.
    pub fn block_output_sizes(&self) -> Vec<usize> {
        let mut size = self.patch_size;
        self.block_strides
            .iter()
            .map(|&s| {
                size = (size + 2 * self.pad()).saturating_sub(self.kernel_size) / s + 1;
                size
            })
            .collect()
    }

    pub fn hypercolumn_channels(&self) -> usize {
        self.block_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.patch_size) || !pow2(self.heatmap_size) || self.patch_size <= self.heatmap_size {
            return Err(Error::Config(format!(
                "patch size {} and heatmap size {} must be powers of two with patch > heatmap",
                self.patch_size, self.heatmap_size
            )));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("at least one category is required".into()));
        }
        if self.block_channels.is_empty() || self.block_channels.len() != self.block_strides.len() {
            return Err(Error::Config(format!(
                "{} block channel counts but {} strides",
                self.block_channels.len(),
                self.block_strides.len()
            )));
        }
        if self.block_channels.iter().chain(&self.block_strides).any(|&v| v == 0)
            || self.kernel_size == 0
            || self.head_width == 0
        {
            return Err(Error::Config("channel counts, strides, kernel and head width must be positive".into()));
        }
        if self.kernel_size > self.patch_size + 2 * self.pad() {
            return Err(Error::Config("kernel larger than padded patch".into()));
        }
        let mut size = self.patch_size;
        for &s in &self.block_strides {
            if size + 2 * self.pad() < self.kernel_size {
                return Err(Error::Config(format!("block input {size}px is smaller than the kernel")));
            }
            size = (size + 2 * self.pad() - self.kernel_size) / s + 1;
        }
        Ok(())
    }

    /// Expected `(out, in, kh, kw)` of every layer.
    pub fn layer_shapes(&self) -> Vec<[usize; 4]> {
        let k = self.kernel_size;
        let mut shapes = Vec::new();
        let mut in_ch = self.input_channels();
        for &c in &self.block_channels {
            shapes.push([c, in_ch, k, k]);
            in_ch = c;
        }
        shapes.push([self.head_width, self.hypercolumn_channels(), 1, 1]);
        shapes.push([1, self.head_width, 1, 1]);
        shapes
    }
}

/// Network input: three centred colour channels followed by one channel per category.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput(pub Tensor);

/// Maps a heat value in [0, 1] onto the input scale [−127, 128].
pub fn heat_to_input(h: f64) -> f64 {
    255.0 * h - 127.0
}

/// Builds the network input for one patch.
///
/// `patch` is `(1, 3, P, P)` with raw values in [0, 255]. The previous heatmap is resized
/// to P×P, rescaled to [−127, 128] and written into channel `3 + category`; the other
/// category channels stay zero.
pub fn encode_input(arch: &ArchDescriptor, patch: &Tensor, prev: &Heatmap, category: usize) -> Result<EncodedInput> {
    let p = arch.patch_size;
    if patch.dims() != [1, IMAGE_CHANNELS, p, p] {
        return Err(Error::Config(format!(
            "patch dims {:?} do not match [1, 3, {p}, {p}]",
            patch.dims()
        )));
    }
    if category >= arch.num_categories {
        return Err(Error::Data(format!(
            "category {category} out of range for {} categories",
            arch.num_categories
        )));
    }
    if !prev.in_unit_range() {
        return Err(Error::Data("previous heatmap has values outside [0, 1]".into()));
    }
    let mut t = Tensor::zeros([1, arch.input_channels(), p, p]);
    for c in 0..IMAGE_CHANNELS {
        for (d, &s) in t.plane_mut(0, c).iter_mut().zip(patch.plane(0, c)) {
            *d = s - 127.0;
        }
    }
    let up = prev.resized(p, p)?;
    for (d, &h) in t.plane_mut(0, IMAGE_CHANNELS + category).iter_mut().zip(up.values()) {
        *d = heat_to_input(h);
    }
    Ok(EncodedInput(t))
}

/// The segmentation model f.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub arch: ArchDescriptor,
    pub params: Vec<LayerParams>,
}

impl SegNet {
    pub fn new(arch: ArchDescriptor, params: Vec<LayerParams>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "architecture needs {} layers, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (shape, p)) in shapes.iter().zip(&params).enumerate() {
            if p.kernel.dims() != *shape || p.bias.len() != shape[0] {
                return Err(Error::Config(format!(
                    "layer {i}: expected kernel {shape:?}, got {:?} with {} biases",
                    p.kernel.dims(),
                    p.bias.len()
                )));
            }
        }
        Ok(SegNet { arch, params })
    }

    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        let params = arch
            .layer_shapes()
            .iter()
            .map(|&[o, i, kh, kw]| LayerParams::zeros(o, i, kh, kw))
            .collect();
        SegNet::new(arch, params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(LayerParams::num_values).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.kernel.is_finite() && p.bias.iter().all(|v| v.is_finite()))
    }

    /// Records the forward pass up to the logits for a batch of encoded inputs.
    pub fn forward_logits(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        let dims = tape.value(input).dims();
        let p = self.arch.patch_size;
        if dims[1..] != [self.arch.input_channels(), p, p] {
            return Err(Error::Config(format!(
                "input dims {:?} do not match architecture ({} channels, {p}x{p})",
                dims,
                self.arch.input_channels()
            )));
        }
        let h = self.arch.heatmap_size;
        let blocks = self.arch.block_channels.len();
        let mut x = input;
        let mut columns = Vec::with_capacity(blocks);
        for (layer, &stride) in self.arch.block_strides.iter().enumerate() {
            let conv = tape.conv2d(x, &self.params, layer, stride, self.arch.pad())?;
            x = tape.relu(conv);
            columns.push(x);
        }
        let hidden = tape.hypercolumn_conv(&columns, &self.params, blocks, h, h)?;
        let hidden = tape.relu(hidden);
        tape.conv2d(hidden, &self.params, blocks + 1, 1, 0)
    }

    /// Heatmaps for a batch of encoded inputs, one per batch entry.
    pub fn predict_batch(&self, inputs: &Tensor) -> Result<Vec<Heatmap>> {
        let mut tape = Tape::new();
        let x = tape.input(inputs.clone());
        let logits = self.forward_logits(&mut tape, x)?;
        let probs = tape.sigmoid(logits);
        let out = tape.value(probs);
        let h = self.arch.heatmap_size;
        (0..out.batch())
            .map(|b| Heatmap::from_values(h, h, out.sample(b).to_vec()))
            .collect()
    }
}

/// Runs f on one encoded input.
pub fn predict_heatmap(net: &SegNet, input: &EncodedInput) -> Result<Heatmap> {
    if input.0.batch() != 1 {
        return Err(Error::Config(format!("expected a single input, got batch {}", input.0.batch())));
    }
    Ok(net.predict_batch(&input.0)?.remove(0))
}

/// Gaussian initialization, std `1/sqrt(fan_in)`, zero biases.
///
/// The first-layer weights of the category channels are drawn with the empirical std of
/// the first-layer colour-channel weights.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> Result<SegNet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (layer, [o, i, kh, kw]) in arch.layer_shapes().into_iter().enumerate() {
        let mut p = LayerParams::zeros(o, i, kh, kw);
        let std = 1.0 / ((i * kh * kw) as f64).sqrt();
        if layer == 0 {
            let k = kh * kw;
            let mut image_weights = Vec::with_capacity(o * IMAGE_CHANNELS * k);
            for oc in 0..o {
                for c in 0..IMAGE_CHANNELS {
                    let plane = p.kernel.plane_mut(oc, c);
                    for v in plane.iter_mut() {
                        *v = std * sample_normal(&mut rng);
                        image_weights.push(*v);
                    }
                }
            }
            let category_std = empirical_std(&image_weights);
            for oc in 0..o {
                for c in IMAGE_CHANNELS..i {
                    for v in p.kernel.plane_mut(oc, c).iter_mut() {
                        *v = category_std * sample_normal(&mut rng);
                    }
                }
            }
        } else {
            for v in p.kernel.data_mut() {
                *v = std * sample_normal(&mut rng);
            }
        }
        params.push(p);
    }
    SegNet::new(arch.clone(), params)
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn empirical_std(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// A network with a fixed batch of inputs and targets, viewed as a differentiable
/// function of its parameters and input.
pub struct SegNetObjective {
    pub net: SegNet,
    pub input: Tensor,
    pub target: Tensor,
    pub weights: Vec<f64>,
}

impl SegNetObjective {
    /// Random reduced-scale problem for gradient checking.
    pub fn random(arch: &ArchDescriptor, seed: u64, batch: usize) -> Result<Self> {
        use rand::Rng;
        let net = init_params(arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let p = arch.patch_size;
        let mut input = Tensor::zeros([batch, arch.input_channels(), p, p]);
        for b in 0..batch {
            let category = rng.random_range(0..arch.num_categories);
            for c in 0..IMAGE_CHANNELS {
                input.plane_mut(b, c).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
            input
                .plane_mut(b, IMAGE_CHANNELS + category)
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let h = arch.heatmap_size;
        let target = Tensor::from_vec(
            [batch, 1, h, h],
            (0..batch * h * h).map(|_| rng.random_range(0..2) as f64).collect(),
        )?;
        let weights = (0..batch).map(|_| rng.random_range(0.5..1.5)).collect();
        Ok(SegNetObjective { net, input, target, weights })
    }
}

impl Differentiable for SegNetObjective {
    fn array_names(&self) -> Vec<String> {
        let blocks = self.net.arch.block_channels.len();
        let mut names = Vec::new();
        for i in 0..self.net.params.len() {
            let layer = match i {
                i if i < blocks => format!("block{i}"),
                i if i == blocks => "hypercolumn".to_string(),
                _ => "output".to_string(),
            };
            names.push(format!("{layer}.kernel"));
            names.push(format!("{layer}.bias"));
        }
        names.push("input".into());
        names
    }

    fn array_mut(&mut self, index: usize) -> &mut [f64] {
        let layers = self.net.params.len();
        if index == 2 * layers {
            return self.input.data_mut();
        }
        let p = &mut self.net.params[index / 2];
        if index % 2 == 0 {
            p.kernel.data_mut()
        } else {
            &mut p.bias
        }
    }

    fn loss(&self) -> Result<f64> {
        self.loss_and_grads().map(|(l, _)| l)
    }

    fn loss_and_grads(&self) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.input(self.input.clone());
        let logits = self.net.forward_logits(&mut tape, x)?;
        let probs = tape.sigmoid(logits);
        let (loss, grad) = nn::weighted_bce(tape.value(probs), &self.target, &self.weights)?;
        let g = tape.backward(&self.net.params, probs, grad)?;
        let mut grads: Vec<Vec<f64>> = g.layers.into_iter().flat_map(|l| [l.kernel, l.bias]).collect();
        grads.push(g.inputs[0].data().to_vec());
        Ok((loss, grads))
    }
}

/// Finite-difference check of the full architecture at reduced scale.
pub fn gradcheck_arch(arch: &ArchDescriptor, seed: u64, corrupt: bool) -> Result<nn::GradCheckReport> {
    let objective = SegNetObjective::random(arch, seed, 2)?;
    if corrupt {
        let mut wrapped = nn::ScaledGradient {
            inner: objective,
            scale: 1.01,
        };
        nn::gradcheck(&mut wrapped, nn::GRADCHECK_STEP, nn::GRADCHECK_TOLERANCE)
    } else {
        let mut objective = objective;
        nn::gradcheck(&mut objective, nn::GRADCHECK_STEP, nn::GRADCHECK_TOLERANCE)
    }
}
