//! Encoder and decoder graphs: specs, weight layout descriptors, validated
//! construction, forward passes, and per-layer complexity reports.
//!
//! The decoder is the low-complexity synthesis path: an input convolution,
//! one upsampling block per factor (transposed conv that halves the channel
//! count, followed by dilated residual units), and a tanh-bounded output
//! convolution. The encoder mirrors it with strided convolutions and
//! Snake-activated residual units operating at doubling channel widths.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::{scalar, Scalar};
use crate::tensor::{
    conv1d, conv_transpose1d, mac_count, snake_beta, tanh_out, ActivationParams, ConvSpec,
    FeatureMap,
};
use crate::Sample;

/// Kernel size of the decoder input conv and the encoder input/unit convs.
pub const IO_KERNEL: usize = 7;
/// Kernel size of the encoder's final projection conv.
const ENCODER_FINAL_KERNEL: usize = 3;

/// One dilated residual unit of the decoder:
/// `y = x + shrink(snake_beta(expand(x)))`, where `expand` is a dilated
/// kernel-3 grouped conv to `expand_ratio * channels` and `shrink` is a
/// kernel-1 grouped conv back down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualUnitSpec {
    pub channels: usize,
    pub dilation: usize,
    pub expand_ratio: usize,
    pub groups: usize,
}

impl ResidualUnitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dilation == 0 || self.expand_ratio == 0 || self.groups == 0 {
            return Err(Error::config(
                "residual unit parameters must all be positive",
            ));
        }
        if self.channels % self.groups != 0 {
            return Err(Error::config(format!(
                "unit channels {} not divisible by groups {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn expanded_channels(&self) -> usize {
        self.channels * self.expand_ratio
    }

    pub fn expand_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.channels,
            out_channels: self.expanded_channels(),
            kernel_size: 3,
            stride: 1,
            dilation: self.dilation,
            groups: self.groups,
            padding: self.dilation,
            transposed: false,
        }
    }

    pub fn shrink_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.expanded_channels(),
            out_channels: self.channels,
            kernel_size: 1,
            stride: 1,
            dilation: 1,
            groups: self.groups,
            padding: 0,
            transposed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderSpec {
    /// Channels of the quantized feature the decoder consumes (D).
    pub latent_dim: usize,
    /// Width after the input conv; halves after every upsampling block.
    pub initial_channels: usize,
    pub upsample_factors: Vec<usize>,
    /// Dilations of the residual units inside every block.
    pub dilations: Vec<usize>,
    /// Group count of the residual-unit convolutions. The transposed and
    /// input/output convs stay dense.
    pub groups: usize,
    pub expand_ratio: usize,
    /// Kernel of the final conv to the waveform; odd so frames are preserved.
    pub output_kernel: usize,
}

impl DecoderSpec {
    pub fn reference() -> Self {
        DecoderSpec {
            latent_dim: 128,
            initial_channels: 192,
            upsample_factors: vec![8, 5, 4, 2],
            dilations: vec![1, 3, 9],
            groups: 2,
            expand_ratio: 2,
            output_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.initial_channels == 0 {
            return Err(Error::config("latent_dim and initial_channels must be positive"));
        }
        if self.upsample_factors.is_empty() {
            return Err(Error::config("decoder needs at least one upsampling block"));
        }
        if self.upsample_factors.iter().any(|r| *r == 0) {
            return Err(Error::config("upsample factors must be positive"));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|d| *d == 0) {
            return Err(Error::config("dilations must be positive and non-empty"));
        }
        if self.groups == 0 || self.expand_ratio == 0 {
            return Err(Error::config("groups and expand_ratio must be positive"));
        }
        if self.output_kernel == 0 || self.output_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "output kernel must be odd to preserve frame alignment, got {}",
                self.output_kernel
            )));
        }
        let blocks = self.upsample_factors.len();
        if self.initial_channels % (1 << blocks) != 0 {
            return Err(Error::config(format!(
                "initial_channels {} must be divisible by 2^{} so every block can halve it",
                self.initial_channels, blocks
            )));
        }
        for k in 1..=blocks {
            let width = self.initial_channels >> k;
            if width % self.groups != 0 {
                return Err(Error::config(format!(
                    "channel width {width} after block {k} not divisible by groups {}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// `(in_channels, out_channels)` of every upsampling block in order.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        (0..self.upsample_factors.len())
            .map(|k| (self.initial_channels >> k, self.initial_channels >> (k + 1)))
            .collect()
    }

    pub fn stride_product(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    fn input_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.latent_dim,
            out_channels: self.initial_channels,
            kernel_size: IO_KERNEL,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: IO_KERNEL / 2,
            transposed: false,
        }
    }

    /// Transposed conv of block `k`: kernel 2r, stride r, padding floor(r/2).
    /// For odd r the raw output is one frame long; the forward trims the
    /// tail so every block multiplies the frame count by exactly r.
    fn upsample_conv(&self, k: usize) -> (ConvSpec, usize) {
        let r = self.upsample_factors[k];
        let (in_ch, out_ch) = self.block_channels()[k];
        let spec = ConvSpec {
            in_channels: in_ch,
            out_channels: out_ch,
            kernel_size: 2 * r,
            stride: r,
            dilation: 1,
            groups: 1,
            padding: r / 2,
            transposed: true,
        };
        (spec, r % 2)
    }

    fn unit_spec(&self, k: usize, u: usize) -> ResidualUnitSpec {
        ResidualUnitSpec {
            channels: self.block_channels()[k].1,
            dilation: self.dilations[u],
            expand_ratio: self.expand_ratio,
            groups: self.groups,
        }
    }

    fn output_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.initial_channels >> self.upsample_factors.len(),
            out_channels: 1,
            kernel_size: self.output_kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: self.output_kernel / 2,
            transposed: false,
        }
    }

    /// Every tensor the decoder needs, in load order.
    pub fn layout(&self) -> Result<Vec<TensorDecl>> {
        self.validate()?;
        let mut decls = Vec::new();
        push_conv_decls(&mut decls, "decoder.input", &self.input_conv());
        for k in 0..self.upsample_factors.len() {
            let (up, _) = self.upsample_conv(k);
            push_conv_decls(&mut decls, &format!("decoder.block{k}.up"), &up);
            for u in 0..self.dilations.len() {
                let unit = self.unit_spec(k, u);
                let base = format!("decoder.block{k}.unit{u}");
                push_conv_decls(&mut decls, &format!("{base}.expand"), &unit.expand_conv());
                push_activation_decls(&mut decls, &format!("{base}.snake"), unit.expanded_channels(), true);
                push_conv_decls(&mut decls, &format!("{base}.shrink"), &unit.shrink_conv());
            }
        }
        push_conv_decls(&mut decls, "decoder.output", &self.output_conv());
        Ok(decls)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    /// Width after the input conv; doubles after every downsampling block.
    pub base_channels: usize,
    /// Downsampling strides, the decoder's upsample factors reversed.
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    /// Output feature dimension D.
    pub latent_dim: usize,
}

impl EncoderSpec {
    pub fn reference() -> Self {
        EncoderSpec {
            base_channels: 12,
            strides: vec![2, 4, 5, 8],
            dilations: vec![1, 3, 9],
            latent_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::config("base_channels and latent_dim must be positive"));
        }
        if self.strides.is_empty() || self.strides.iter().any(|s| *s == 0) {
            return Err(Error::config("encoder strides must be positive and non-empty"));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|d| *d == 0) {
            return Err(Error::config("dilations must be positive and non-empty"));
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    /// Channel width at the input of block `k`.
    fn block_width(&self, k: usize) -> usize {
        self.base_channels << k
    }

    fn input_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: 1,
            out_channels: self.base_channels,
            kernel_size: IO_KERNEL,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: IO_KERNEL / 2,
            transposed: false,
        }
    }

    fn unit_convs(&self, k: usize, u: usize) -> (ConvSpec, ConvSpec) {
        let c = self.block_width(k);
        let d = self.dilations[u];
        let dilated = ConvSpec {
            in_channels: c,
            out_channels: c,
            kernel_size: IO_KERNEL,
            stride: 1,
            dilation: d,
            groups: 1,
            padding: (IO_KERNEL - 1) / 2 * d,
            transposed: false,
        };
        let point = ConvSpec::pointwise(c, c, 1);
        (dilated, point)
    }

    /// Strided conv of block `k`: kernel 2r, stride r, padding ceil(r/2);
    /// divides the frame count by exactly r and doubles the channels.
    fn down_conv(&self, k: usize) -> ConvSpec {
        let r = self.strides[k];
        let c = self.block_width(k);
        ConvSpec {
            in_channels: c,
            out_channels: 2 * c,
            kernel_size: 2 * r,
            stride: r,
            dilation: 1,
            groups: 1,
            padding: r.div_ceil(2),
            transposed: false,
        }
    }

    fn final_conv(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.block_width(self.strides.len()),
            out_channels: self.latent_dim,
            kernel_size: ENCODER_FINAL_KERNEL,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: ENCODER_FINAL_KERNEL / 2,
            transposed: false,
        }
    }

    pub fn layout(&self) -> Result<Vec<TensorDecl>> {
        self.validate()?;
        let mut decls = Vec::new();
        push_conv_decls(&mut decls, "encoder.input", &self.input_conv());
        for k in 0..self.strides.len() {
            let c = self.block_width(k);
            for u in 0..self.dilations.len() {
                let (dilated, point) = self.unit_convs(k, u);
                let base = format!("encoder.block{k}.unit{u}");
                push_activation_decls(&mut decls, &format!("{base}.snake1"), c, false);
                push_conv_decls(&mut decls, &format!("{base}.conv1"), &dilated);
                push_activation_decls(&mut decls, &format!("{base}.snake2"), c, false);
                push_conv_decls(&mut decls, &format!("{base}.conv2"), &point);
            }
            push_activation_decls(&mut decls, &format!("encoder.block{k}.down.snake"), c, false);
            push_conv_decls(&mut decls, &format!("encoder.block{k}.down"), &self.down_conv(k));
        }
        push_activation_decls(
            &mut decls,
            "encoder.final.snake",
            self.block_width(self.strides.len()),
            false,
        );
        push_conv_decls(&mut decls, "encoder.final", &self.final_conv());
        Ok(decls)
    }
}

/// Whole-model hyperparameters; the decoder and encoder specs derive from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub latent_dim: usize,
    pub initial_channels: usize,
    pub upsample_factors: Vec<usize>,
    pub dilations: Vec<usize>,
    pub groups: usize,
    pub expand_ratio: usize,
    pub output_kernel: usize,
    pub encoder_base_channels: usize,
}

impl ModelConfig {
    pub fn reference() -> Self {
        ModelConfig {
            sample_rate: 16000,
            latent_dim: 128,
            initial_channels: 192,
            upsample_factors: vec![8, 5, 4, 2],
            dilations: vec![1, 3, 9],
            groups: 2,
            expand_ratio: 2,
            output_kernel: 7,
            encoder_base_channels: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample_rate must be positive"));
        }
        if self.encoder_base_channels == 0 {
            return Err(Error::config("encoder_base_channels must be positive"));
        }
        self.decoder_spec().validate()?;
        self.encoder_spec().validate()?;
        if self.sample_rate as usize % self.stride_product() != 0 {
            return Err(Error::config(format!(
                "sample_rate {} not divisible by the stride product {}",
                self.sample_rate,
                self.stride_product()
            )));
        }
        Ok(())
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        DecoderSpec {
            latent_dim: self.latent_dim,
            initial_channels: self.initial_channels,
            upsample_factors: self.upsample_factors.clone(),
            dilations: self.dilations.clone(),
            groups: self.groups,
            expand_ratio: self.expand_ratio,
            output_kernel: self.output_kernel,
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        let mut strides = self.upsample_factors.clone();
        strides.reverse();
        EncoderSpec {
            base_channels: self.encoder_base_channels,
            strides,
            dilations: self.dilations.clone(),
            latent_dim: self.latent_dim,
        }
    }

    /// Samples per latent frame.
    pub fn stride_product(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    /// Latent frames per second of audio.
    pub fn frame_rate(&self) -> usize {
        self.sample_rate as usize / self.stride_product()
    }

    /// Layout of the full model: encoder plus decoder tensors.
    pub fn layout(&self) -> Result<Vec<TensorDecl>> {
        let mut decls = self.encoder_spec().layout()?;
        decls.extend(self.decoder_spec().layout()?);
        Ok(decls)
    }
}

/// How a declared tensor should be randomly initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Convolution weight with the given fan-in (per-group inputs × kernel).
    Conv { fan_in: usize },
    Bias,
    /// Strictly positive per-channel activation parameter.
    Positive,
}

/// Name, shape, and init class of one tensor in a model layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

fn push_conv_decls(decls: &mut Vec<TensorDecl>, base: &str, spec: &ConvSpec) {
    let shape = spec.weight_shape();
    let fan_in = if spec.transposed {
        (spec.in_channels / spec.groups) * spec.kernel_size
    } else {
        shape[1] * shape[2]
    };
    decls.push(TensorDecl {
        name: format!("{base}.weight"),
        shape: shape.to_vec(),
        init: InitKind::Conv { fan_in },
    });
    decls.push(TensorDecl {
        name: format!("{base}.bias"),
        shape: vec![spec.out_channels],
        init: InitKind::Bias,
    });
}

fn push_activation_decls(decls: &mut Vec<TensorDecl>, base: &str, channels: usize, with_beta: bool) {
    decls.push(TensorDecl {
        name: format!("{base}.alpha"),
        shape: vec![channels],
        init: InitKind::Positive,
    });
    if with_beta {
        decls.push(TensorDecl {
            name: format!("{base}.beta"),
            shape: vec![channels],
            init: InitKind::Positive,
        });
    }
}

/// A shaped, named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = Sample> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }
}

/// Named tensor collection holding everything a model needs. Tensors are
/// namespaced by component prefix (`encoder.`, `decoder.`, `quantizer.`), so
/// one file can hold the complete codec.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelWeights<S: Scalar = Sample> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ModelWeights<S> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iteration in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|n| n.as_str())
    }

    /// Merges `other` into `self`; duplicate names are an error.
    pub fn merge(&mut self, other: ModelWeights<S>) -> Result<()> {
        for (name, tensor) in other.tensors {
            self.insert(name, tensor)?;
        }
        Ok(())
    }

    /// Validates that every declared tensor exists with its exact shape and
    /// that no undeclared tensor shares the declarations' prefix.
    pub fn check_layout(&self, decls: &[TensorDecl], prefix: &str) -> Result<()> {
        for decl in decls {
            let tensor = self.tensors.get(&decl.name).ok_or_else(|| Error::Validation {
                path: decl.name.clone(),
                reason: "required tensor is missing".into(),
            })?;
            if tensor.shape() != decl.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: decl.name.clone(),
                    expected: decl.shape.clone(),
                    found: tensor.shape().to_vec(),
                });
            }
        }
        for name in self.tensors.keys() {
            if name.starts_with(prefix) && !decls.iter().any(|d| &d.name == name) {
                return Err(Error::Validation {
                    path: name.clone(),
                    reason: "tensor is not part of the model layout".into(),
                });
            }
        }
        Ok(())
    }

    fn conv_parts(&self, base: &str) -> Result<(Vec<S>, Vec<S>)> {
        let weight = self.require(&format!("{base}.weight"))?;
        let bias = self.require(&format!("{base}.bias"))?;
        Ok((weight.data().to_vec(), bias.data().to_vec()))
    }

    fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.tensors.get(name).ok_or_else(|| Error::Validation {
            path: name.to_string(),
            reason: "required tensor is missing".into(),
        })
    }

    fn snake_params(&self, base: &str, with_beta: bool) -> Result<ActivationParams<S>> {
        let alpha = self.require(&format!("{base}.alpha"))?.data().to_vec();
        let beta = if with_beta {
            self.require(&format!("{base}.beta"))?.data().to_vec()
        } else {
            alpha.clone()
        };
        ActivationParams::new(alpha, beta)
            .map_err(|e| Error::Validation {
                path: base.to_string(),
                reason: e.to_string(),
            })
    }
}

/// Fresh weights for a layout, seeded and deterministic: uniform
/// `±1/sqrt(fan_in)` for convs, small uniform biases, activation parameters
/// near 1.
pub fn random_weights<S: Scalar>(decls: &[TensorDecl], seed: u64) -> ModelWeights<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::new();
    for decl in decls {
        let n: usize = decl.shape.iter().product();
        let data: Vec<S> = match decl.init {
            InitKind::Conv { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| scalar(rng.gen_range(-bound..bound)))
                    .collect()
            }
            InitKind::Bias => (0..n)
                .map(|_| scalar(rng.gen_range(-0.01..0.01)))
                .collect(),
            InitKind::Positive => (0..n)
                .map(|_| scalar(f64::exp(rng.gen_range(-0.25..0.25))))
                .collect(),
        };
        let tensor = Tensor::new(decl.shape.clone(), data).expect("layout shapes are consistent");
        weights
            .insert(decl.name.clone(), tensor)
            .expect("layout names are unique");
    }
    weights
}

/// All-zero weights (activation parameters set to 1). Useful for exercising
/// the residual bypass paths.
pub fn zero_weights<S: Scalar>(decls: &[TensorDecl]) -> ModelWeights<S> {
    let mut weights = ModelWeights::new();
    for decl in decls {
        let n: usize = decl.shape.iter().product();
        let fill = match decl.init {
            InitKind::Positive => S::one(),
            _ => S::zero(),
        };
        let tensor = Tensor::new(decl.shape.clone(), vec![fill; n]).expect("consistent shapes");
        weights.insert(decl.name.clone(), tensor).expect("unique names");
    }
    weights
}

#[derive(Debug, Clone)]
struct ConvLayer<S: Scalar> {
    spec: ConvSpec,
    weights: Vec<S>,
    bias: Vec<S>,
    /// Frames removed from the tail after a transposed conv so the output
    /// length is exactly `stride × input frames`.
    trim_tail: usize,
}

impl<S: Scalar> ConvLayer<S> {
    fn from_weights(
        weights: &ModelWeights<S>,
        base: &str,
        spec: ConvSpec,
        trim_tail: usize,
    ) -> Result<Self> {
        let (w, b) = weights.conv_parts(base)?;
        Ok(Self {
            spec,
            weights: w,
            bias: b,
            trim_tail,
        })
    }

    fn forward(&self, x: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        let y = if self.spec.transposed {
            conv_transpose1d(x, &self.spec, &self.weights, &self.bias)?
        } else {
            conv1d(x, &self.spec, &self.weights, &self.bias)?
        };
        if self.trim_tail == 0 {
            Ok(y)
        } else {
            Ok(y.truncate_frames(y.frames() - self.trim_tail))
        }
    }
}

/// Executable decoder residual unit.
#[derive(Debug, Clone)]
pub struct ResidualUnit<S: Scalar = Sample> {
    spec: ResidualUnitSpec,
    expand: ConvLayer<S>,
    snake: ActivationParams<S>,
    shrink: ConvLayer<S>,
}

impl<S: Scalar> ResidualUnit<S> {
    pub fn from_weights(
        spec: ResidualUnitSpec,
        weights: &ModelWeights<S>,
        base: &str,
    ) -> Result<Self> {
        spec.validate()?;
        let expand = ConvLayer::from_weights(weights, &format!("{base}.expand"), spec.expand_conv(), 0)?;
        let shrink = ConvLayer::from_weights(weights, &format!("{base}.shrink"), spec.shrink_conv(), 0)?;
        let snake = weights.snake_params(&format!("{base}.snake"), true)?;
        Ok(Self {
            spec,
            expand,
            snake,
            shrink,
        })
    }

    pub fn spec(&self) -> &ResidualUnitSpec {
        &self.spec
    }

    pub fn forward(&self, x: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        if x.channels() != self.spec.channels {
            return Err(Error::config(format!(
                "residual unit expects {} channels, input has {}",
                self.spec.channels,
                x.channels()
            )));
        }
        let expanded = self.expand.forward(x)?;
        let activated = snake_beta(&expanded, &self.snake)?;
        let shrunk = self.shrink.forward(&activated)?;
        debug_assert_eq!(shrunk.frames(), x.frames());
        let mut out = x.clone();
        for c in 0..out.channels() {
            let add = shrunk.channel(c);
            for (v, a) in out.channel_mut(c).iter_mut().zip(add) {
                *v += *a;
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper matching the unit's mathematical description.
pub fn residual_unit_forward<S: Scalar>(
    x: &FeatureMap<S>,
    unit: &ResidualUnit<S>,
) -> Result<FeatureMap<S>> {
    unit.forward(x)
}

#[derive(Debug, Clone)]
struct DecoderBlock<S: Scalar> {
    up: ConvLayer<S>,
    units: Vec<ResidualUnit<S>>,
}

/// Immutable executable decoder graph.
#[derive(Debug, Clone)]
pub struct Decoder<S: Scalar = Sample> {
    spec: DecoderSpec,
    input: ConvLayer<S>,
    blocks: Vec<DecoderBlock<S>>,
    output: ConvLayer<S>,
}

pub fn build_decoder<S: Scalar>(spec: &DecoderSpec, weights: &ModelWeights<S>) -> Result<Decoder<S>> {
    weights.check_layout(&spec.layout()?, "decoder.")?;
    let input = ConvLayer::from_weights(weights, "decoder.input", spec.input_conv(), 0)?;
    let mut blocks = Vec::new();
    for k in 0..spec.upsample_factors.len() {
        let (up_spec, trim) = spec.upsample_conv(k);
        let up = ConvLayer::from_weights(weights, &format!("decoder.block{k}.up"), up_spec, trim)?;
        let mut units = Vec::new();
        for u in 0..spec.dilations.len() {
            units.push(ResidualUnit::from_weights(
                spec.unit_spec(k, u),
                weights,
                &format!("decoder.block{k}.unit{u}"),
            )?);
        }
        blocks.push(DecoderBlock { up, units });
    }
    let output = ConvLayer::from_weights(weights, "decoder.output", spec.output_conv(), 0)?;
    Ok(Decoder {
        spec: spec.clone(),
        input,
        blocks,
        output,
    })
}

impl<S: Scalar> Decoder<S> {
    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    /// Latent features → mono waveform in (−1, 1).
    pub fn forward(&self, x_hat: &FeatureMap<S>) -> Result<Vec<S>> {
        if x_hat.channels() != self.spec.latent_dim {
            return Err(Error::config(format!(
                "decoder expects {} latent channels, input has {}",
                self.spec.latent_dim,
                x_hat.channels()
            )));
        }
        let mut x = self.input.forward(x_hat)?;
        for block in &self.blocks {
            x = block.up.forward(&x)?;
            for unit in &block.units {
                x = unit.forward(&x)?;
            }
        }
        let y = self.output.forward(&x)?;
        let y = tanh_out(&y);
        debug_assert_eq!(y.frames(), x_hat.frames() * self.spec.stride_product());
        Ok(y.into_data())
    }
}

pub fn decode_features<S: Scalar>(decoder: &Decoder<S>, x_hat: &FeatureMap<S>) -> Result<Vec<S>> {
    decoder.forward(x_hat)
}

#[derive(Debug, Clone)]
struct EncoderUnit<S: Scalar> {
    snake1: ActivationParams<S>,
    conv1: ConvLayer<S>,
    snake2: ActivationParams<S>,
    conv2: ConvLayer<S>,
}

#[derive(Debug, Clone)]
struct EncoderBlock<S: Scalar> {
    units: Vec<EncoderUnit<S>>,
    down_snake: ActivationParams<S>,
    down: ConvLayer<S>,
}

/// Immutable executable encoder graph (analysis path).
#[derive(Debug, Clone)]
pub struct Encoder<S: Scalar = Sample> {
    spec: EncoderSpec,
    input: ConvLayer<S>,
    blocks: Vec<EncoderBlock<S>>,
    final_snake: ActivationParams<S>,
    final_conv: ConvLayer<S>,
}

pub fn build_encoder<S: Scalar>(spec: &EncoderSpec, weights: &ModelWeights<S>) -> Result<Encoder<S>> {
    weights.check_layout(&spec.layout()?, "encoder.")?;
    let input = ConvLayer::from_weights(weights, "encoder.input", spec.input_conv(), 0)?;
    let mut blocks = Vec::new();
    for k in 0..spec.strides.len() {
        let mut units = Vec::new();
        for u in 0..spec.dilations.len() {
            let base = format!("encoder.block{k}.unit{u}");
            let (dilated, point) = spec.unit_convs(k, u);
            units.push(EncoderUnit {
                snake1: weights.snake_params(&format!("{base}.snake1"), false)?,
                conv1: ConvLayer::from_weights(weights, &format!("{base}.conv1"), dilated, 0)?,
                snake2: weights.snake_params(&format!("{base}.snake2"), false)?,
                conv2: ConvLayer::from_weights(weights, &format!("{base}.conv2"), point, 0)?,
            });
        }
        blocks.push(EncoderBlock {
            units,
            down_snake: weights.snake_params(&format!("encoder.block{k}.down.snake"), false)?,
            down: ConvLayer::from_weights(weights, &format!("encoder.block{k}.down"), spec.down_conv(k), 0)?,
        });
    }
    Ok(Encoder {
        spec: spec.clone(),
        input,
        blocks,
        final_snake: weights.snake_params("encoder.final.snake", false)?,
        final_conv: ConvLayer::from_weights(weights, "encoder.final", spec.final_conv(), 0)?,
    })
}

impl<S: Scalar> Encoder<S> {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Mono waveform → latent features; sample count must be divisible by
    /// the stride product (zero-pad the tail first).
    pub fn forward(&self, samples: &[S]) -> Result<FeatureMap<S>> {
        let hop = self.spec.stride_product();
        if samples.is_empty() || samples.len() % hop != 0 {
            return Err(Error::config(format!(
                "sample count {} must be a positive multiple of the stride product {}",
                samples.len(),
                hop
            )));
        }
        let mut x = self.input.forward(&FeatureMap::from_samples(samples.to_vec()))?;
        for block in &self.blocks {
            for unit in &block.units {
                let mut y = snake_beta(&x, &unit.snake1)?;
                y = unit.conv1.forward(&y)?;
                y = snake_beta(&y, &unit.snake2)?;
                y = unit.conv2.forward(&y)?;
                debug_assert_eq!(y.frames(), x.frames());
                for c in 0..x.channels() {
                    let add = y.channel(c);
                    for (v, a) in x.channel_mut(c).iter_mut().zip(add) {
                        *v += *a;
                    }
                }
            }
            let y = snake_beta(&x, &block.down_snake)?;
            x = block.down.forward(&y)?;
        }
        let y = snake_beta(&x, &self.final_snake)?;
        let out = self.final_conv.forward(&y)?;
        debug_assert_eq!(out.frames(), samples.len() / hop);
        Ok(out)
    }
}

pub fn encode_features<S: Scalar>(encoder: &Encoder<S>, samples: &[S]) -> Result<FeatureMap<S>> {
    encoder.forward(samples)
}

/// One row of a complexity report: a layer path and its MAC count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMacs {
    pub path: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub rows: Vec<LayerMacs>,
    pub total_macs: u64,
    pub seconds: f64,
    pub gmacs_per_second: f64,
}

impl ComplexityReport {
    pub fn render(&self, per_layer: bool) -> String {
        let mut out = String::new();
        if per_layer {
            for row in &self.rows {
                let _ = writeln!(out, "{:<28} {:>14}", row.path, row.macs);
            }
        }
        let _ = writeln!(out, "total_macs: {}", self.total_macs);
        let _ = writeln!(out, "seconds: {}", self.seconds);
        let _ = writeln!(out, "gmacs_per_second: {:.6}", self.gmacs_per_second);
        out
    }
}

/// Static per-layer MAC accounting of a decoder synthesizing `seconds` of
/// audio at `sample_rate`. Counts multiplies only (no bias adds or
/// activations), matching an instrumented naive forward pass exactly.
pub fn decoder_complexity(spec: &DecoderSpec, seconds: f64, sample_rate: u32) -> Result<ComplexityReport> {
    spec.validate()?;
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::config("seconds must be positive and finite"));
    }
    let samples = (seconds * sample_rate as f64).round() as u64;
    let hop = spec.stride_product() as u64;
    let frames = samples / hop;
    if frames == 0 {
        return Err(Error::DegenerateLength(format!(
            "{samples} samples are fewer than one latent frame ({hop} samples)"
        )));
    }
    let mut rows = Vec::new();
    let mut f = frames as usize;
    rows.push(LayerMacs {
        path: "decoder.input".into(),
        macs: mac_count(&spec.input_conv(), f)?,
    });
    for k in 0..spec.upsample_factors.len() {
        let (up, _) = spec.upsample_conv(k);
        rows.push(LayerMacs {
            path: format!("decoder.block{k}.up"),
            macs: mac_count(&up, f)?,
        });
        f *= spec.upsample_factors[k];
        for u in 0..spec.dilations.len() {
            let unit = spec.unit_spec(k, u);
            let macs = mac_count(&unit.expand_conv(), f)? + mac_count(&unit.shrink_conv(), f)?;
            rows.push(LayerMacs {
                path: format!("decoder.block{k}.unit{u}"),
                macs,
            });
        }
    }
    rows.push(LayerMacs {
        path: "decoder.output".into(),
        macs: mac_count(&spec.output_conv(), f)?,
    });
    let total_macs: u64 = rows.iter().map(|r| r.macs).sum();
    Ok(ComplexityReport {
        rows,
        total_macs,
        seconds,
        gmacs_per_second: total_macs as f64 / seconds / 1e9,
    })
}
