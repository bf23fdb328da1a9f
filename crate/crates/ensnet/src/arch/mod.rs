//! The three architecture families as layer graphs over the tensor core.
//!
//! Builders turn a declarative spec into a [`Model`]: an ordered list of
//! layers owning every trainable tensor. The same code paths produce both
//! the full-size `paper` presets and the tiny `toy` presets the test suite
//! trains at desk scale.

mod densenet;
mod efficientnet;
mod xception;

pub use densenet::build_densenet_like;
pub use efficientnet::build_efficientnet_like;
pub use xception::build_xception_like;

use std::sync::RwLock;

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{
    channel_norm, concat_channels, Activation, NormMode, NormState, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error("bad spec metadata: {0}")]
    Metadata(String),
}

/// Architecture family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Xception,
    DenseNet,
    EfficientNet,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Family::Xception => "xception",
            Family::DenseNet => "densenet",
            Family::EfficientNet => "efficientnet",
        };
        f.write_str(name)
    }
}

/// Stack of separable-conv modules with shortcut summations on every module
/// except the first and last.
#[derive(Debug, Clone, PartialEq)]
pub struct XceptionSpec {
    pub num_modules: usize,
    pub stem_channels: usize,
    /// Output channels per module; length must equal `num_modules`.
    pub channels_per_module: Vec<usize>,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_resolution: usize,
}

impl XceptionSpec {
    /// Desk-scale preset used throughout the tests.
    pub fn toy() -> Self {
        XceptionSpec {
            num_modules: 4,
            stem_channels: 8,
            channels_per_module: vec![8, 16, 16, 32],
            kernel_size: 3,
            num_classes: 3,
            in_channels: 1,
            input_resolution: 16,
        }
    }

    /// Full-size preset: 14 modules of paired separable convolutions.
    pub fn paper() -> Self {
        XceptionSpec {
            num_modules: 14,
            stem_channels: 32,
            channels_per_module: vec![
                64, 128, 256, 728, 728, 728, 728, 728, 728, 728, 728, 1024, 1536, 2048,
            ],
            kernel_size: 3,
            num_classes: 3,
            in_channels: 1,
            input_resolution: 299,
        }
    }
}

/// Densely connected blocks joined by compressing transition layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    /// Channels each dense layer adds to the running concatenation.
    pub growth_rate: usize,
    /// Layers per dense block.
    pub block_layout: Vec<usize>,
    pub initial_channels: usize,
    /// Transition keeps `floor(compression * channels)` channels; in (0, 1].
    pub compression: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_resolution: usize,
}

impl DenseSpec {
    pub fn toy() -> Self {
        DenseSpec {
            growth_rate: 4,
            block_layout: vec![2, 2],
            initial_channels: 8,
            compression: 0.5,
            num_classes: 3,
            in_channels: 1,
            input_resolution: 16,
        }
    }

    /// DenseNet121-style layout.
    pub fn paper() -> Self {
        DenseSpec {
            growth_rate: 32,
            block_layout: vec![6, 12, 24, 16],
            initial_channels: 64,
            compression: 0.5,
            num_classes: 3,
            in_channels: 1,
            input_resolution: 224,
        }
    }
}

/// Compound-scaled stack of separable-conv stages.
///
/// The scale coefficient `phi` expands the base layout: per-stage repeats
/// become `ceil(base * alpha^phi)`, widths become `base * beta^phi` rounded
/// to the nearest multiple of 4 (minimum 4), and the input resolution
/// becomes `round(base * gamma^phi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffSpec {
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub base_repeats: Vec<usize>,
    pub base_widths: Vec<usize>,
    pub base_resolution: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl EffSpec {
    pub fn toy() -> Self {
        EffSpec {
            phi: 0.0,
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.0,
            base_repeats: vec![1, 2, 2],
            base_widths: vec![8, 16, 32],
            base_resolution: 16,
            num_classes: 3,
            in_channels: 1,
        }
    }

    /// B4-style scale over a B0-style base layout.
    pub fn paper() -> Self {
        EffSpec {
            phi: 4.0,
            alpha: 1.2,
            beta: 1.1,
            gamma: 1.15,
            base_repeats: vec![1, 2, 2, 3, 3, 4, 1],
            base_widths: vec![16, 24, 40, 80, 112, 192, 320],
            base_resolution: 224,
            num_classes: 3,
            in_channels: 1,
        }
    }

    pub fn scaled_repeats(&self) -> Vec<usize> {
        let factor = self.alpha.powf(self.phi);
        self.base_repeats
            .iter()
            .map(|&r| (r as f64 * factor).ceil() as usize)
            .collect()
    }

    pub fn scaled_widths(&self) -> Vec<usize> {
        let factor = self.beta.powf(self.phi);
        self.base_widths
            .iter()
            .map(|&w| {
                let snapped = ((w as f64 * factor) / 4.0).round() * 4.0;
                (snapped as usize).max(4)
            })
            .collect()
    }

    pub fn scaled_resolution(&self) -> usize {
        (self.base_resolution as f64 * self.gamma.powf(self.phi)).round() as usize
    }
}

/// Any of the three family specs; the unit stored in checkpoints and config
/// files.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchSpec {
    Xception(XceptionSpec),
    Dense(DenseSpec),
    Efficient(EffSpec),
}

impl ArchSpec {
    pub fn family(&self) -> Family {
        match self {
            ArchSpec::Xception(_) => Family::Xception,
            ArchSpec::Dense(_) => Family::DenseNet,
            ArchSpec::Efficient(_) => Family::EfficientNet,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Model, SpecError> {
        match self {
            ArchSpec::Xception(s) => build_xception_like(s, seed),
            ArchSpec::Dense(s) => build_densenet_like(s, seed),
            ArchSpec::Efficient(s) => build_efficientnet_like(s, seed),
        }
    }

    fn join(values: &[usize]) -> String {
        values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Canonical `key = value` text form, stored verbatim in checkpoints.
    pub fn to_metadata(&self) -> String {
        match self {
            ArchSpec::Xception(s) => format!(
                "family = xception\nnum_modules = {}\nstem_channels = {}\nchannels = {}\n\
                 kernel_size = {}\nnum_classes = {}\nin_channels = {}\nresolution = {}\n",
                s.num_modules,
                s.stem_channels,
                Self::join(&s.channels_per_module),
                s.kernel_size,
                s.num_classes,
                s.in_channels,
                s.input_resolution
            ),
            ArchSpec::Dense(s) => format!(
                "family = densenet\ngrowth_rate = {}\nblocks = {}\ninitial_channels = {}\n\
                 compression = {}\nnum_classes = {}\nin_channels = {}\nresolution = {}\n",
                s.growth_rate,
                Self::join(&s.block_layout),
                s.initial_channels,
                s.compression,
                s.num_classes,
                s.in_channels,
                s.input_resolution
            ),
            ArchSpec::Efficient(s) => format!(
                "family = efficientnet\nphi = {}\nalpha = {}\nbeta = {}\ngamma = {}\n\
                 base_repeats = {}\nbase_widths = {}\nbase_resolution = {}\n\
                 num_classes = {}\nin_channels = {}\n",
                s.phi,
                s.alpha,
                s.beta,
                s.gamma,
                Self::join(&s.base_repeats),
                Self::join(&s.base_widths),
                s.base_resolution,
                s.num_classes,
                s.in_channels
            ),
        }
    }

    /// Parses the text form produced by [`ArchSpec::to_metadata`].
    pub fn from_metadata(text: &str) -> Result<ArchSpec, SpecError> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SpecError::Metadata(format!("bad line {line:?}")))?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| {
            map.get(key)
                .cloned()
                .ok_or_else(|| SpecError::Metadata(format!("missing key {key:?}")))
        };
        let parse_usize = |key: &str| -> Result<usize, SpecError> {
            get(key)?
                .parse()
                .map_err(|_| SpecError::Metadata(format!("bad integer for {key:?}")))
        };
        let parse_f64 = |key: &str| -> Result<f64, SpecError> {
            get(key)?
                .parse()
                .map_err(|_| SpecError::Metadata(format!("bad number for {key:?}")))
        };
        let parse_list = |key: &str| -> Result<Vec<usize>, SpecError> {
            get(key)?
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| SpecError::Metadata(format!("bad list for {key:?}")))
                })
                .collect()
        };
        match get("family")?.as_str() {
            "xception" => Ok(ArchSpec::Xception(XceptionSpec {
                num_modules: parse_usize("num_modules")?,
                stem_channels: parse_usize("stem_channels")?,
                channels_per_module: parse_list("channels")?,
                kernel_size: parse_usize("kernel_size")?,
                num_classes: parse_usize("num_classes")?,
                in_channels: parse_usize("in_channels")?,
                input_resolution: parse_usize("resolution")?,
            })),
            "densenet" => Ok(ArchSpec::Dense(DenseSpec {
                growth_rate: parse_usize("growth_rate")?,
                block_layout: parse_list("blocks")?,
                initial_channels: parse_usize("initial_channels")?,
                compression: parse_f64("compression")?,
                num_classes: parse_usize("num_classes")?,
                in_channels: parse_usize("in_channels")?,
                input_resolution: parse_usize("resolution")?,
            })),
            "efficientnet" => Ok(ArchSpec::Efficient(EffSpec {
                phi: parse_f64("phi")?,
                alpha: parse_f64("alpha")?,
                beta: parse_f64("beta")?,
                gamma: parse_f64("gamma")?,
                base_repeats: parse_list("base_repeats")?,
                base_widths: parse_list("base_widths")?,
                base_resolution: parse_usize("base_resolution")?,
                num_classes: parse_usize("num_classes")?,
                in_channels: parse_usize("in_channels")?,
            })),
            other => Err(SpecError::Metadata(format!("unknown family {other:?}"))),
        }
    }
}

// ---- layers ----

pub(crate) struct ConvLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) struct SeparableConvLayer {
    pub depthwise: Tensor,
    pub pointwise: Tensor,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) struct NormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: RwLock<NormState>,
    pub eps: f64,
    pub momentum: f64,
}

pub(crate) struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub(crate) struct ResidualLayer {
    pub body: Vec<Layer>,
    /// 1x1 projection applied to the shortcut when the body changes the
    /// channel count.
    pub projection: Option<ConvLayer>,
}

pub(crate) struct DenseBlockLayer {
    /// Inner layer stacks; stack `j` consumes the concatenation of the block
    /// input and the outputs of stacks `0..j`.
    pub layers: Vec<Vec<Layer>>,
}

pub(crate) enum Layer {
    Conv(ConvLayer),
    SeparableConv(SeparableConvLayer),
    Norm(NormLayer),
    Activation(Activation),
    AvgPool { size: usize, stride: usize },
    GlobalAvgPool,
    Linear(LinearLayer),
    Residual(ResidualLayer),
    DenseBlock(DenseBlockLayer),
}

impl ConvLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl Layer {
    fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor, TensorError> {
        match self {
            Layer::Conv(conv) => conv.forward(x),
            Layer::SeparableConv(sep) => {
                x.depthwise_separable_conv(&sep.depthwise, &sep.pointwise, sep.stride, sep.padding)
            }
            Layer::Norm(norm) => match mode {
                NormMode::Train => {
                    let mut state = norm.state.write().unwrap();
                    channel_norm(x, &norm.gamma, &norm.beta, norm.eps, norm.momentum, mode, &mut state)
                }
                NormMode::Eval => {
                    let mut snapshot = norm.state.read().unwrap().clone();
                    channel_norm(
                        x,
                        &norm.gamma,
                        &norm.beta,
                        norm.eps,
                        norm.momentum,
                        mode,
                        &mut snapshot,
                    )
                }
            },
            Layer::Activation(kind) => Ok(x.activation(*kind)),
            Layer::AvgPool { size, stride } => x.avg_pool2d(*size, *stride),
            Layer::GlobalAvgPool => x.global_avg_pool(),
            Layer::Linear(linear) => x.linear(&linear.weight, &linear.bias),
            Layer::Residual(res) => {
                let mut out = x.clone();
                for layer in &res.body {
                    out = layer.forward(&out, mode)?;
                }
                let shortcut = match &res.projection {
                    Some(proj) => proj.forward(x)?,
                    None => x.clone(),
                };
                out.residual_add(&shortcut)
            }
            Layer::DenseBlock(block) => {
                let mut features = vec![x.clone()];
                for stack in &block.layers {
                    let mut out = concat_channels(&features)?;
                    for layer in stack {
                        out = layer.forward(&out, mode)?;
                    }
                    features.push(out);
                }
                concat_channels(&features)
            }
        }
    }
}

/// A built network: metadata plus an ordered layer graph owning every
/// trainable tensor.
///
/// `forward` (inference) reads shared state only; `forward_train` updates
/// normalization running statistics and therefore borrows exclusively.
pub struct Model {
    family: Family,
    spec: ArchSpec,
    input_resolution: usize,
    in_channels: usize,
    num_classes: usize,
    layers: Vec<Layer>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Model(family={}, resolution={}, classes={}, parameters={})",
            self.family,
            self.input_resolution,
            self.num_classes,
            self.count_parameters()
        )
    }
}

impl Model {
    pub(crate) fn from_parts(spec: ArchSpec, input_resolution: usize, layers: Vec<Layer>) -> Model {
        let (num_classes, in_channels) = match &spec {
            ArchSpec::Xception(s) => (s.num_classes, s.in_channels),
            ArchSpec::Dense(s) => (s.num_classes, s.in_channels),
            ArchSpec::Efficient(s) => (s.num_classes, s.in_channels),
        };
        Model {
            family: spec.family(),
            spec,
            input_resolution,
            in_channels,
            num_classes,
            layers,
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), TensorError> {
        let shape = batch.shape();
        let n = shape.first().copied().unwrap_or(0);
        let expected = vec![
            n,
            self.in_channels,
            self.input_resolution,
            self.input_resolution,
        ];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(TensorError::shape(
                format!("{} model input", self.family),
                &expected,
                &shape,
            ));
        }
        Ok(())
    }

    /// Inference-mode forward: running statistics are read, never written.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, TensorError> {
        self.check_input(batch)?;
        self.forward_impl(batch, NormMode::Eval)
    }

    /// Training-mode forward: normalization uses batch statistics and
    /// updates the running estimates, hence the exclusive borrow.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<Tensor, TensorError> {
        self.check_input(batch)?;
        self.forward_impl(batch, NormMode::Train)
    }

    fn forward_impl(&self, batch: &Tensor, mode: NormMode) -> Result<Tensor, TensorError> {
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    /// Every trainable tensor exactly once, in graph order.
    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Trainable tensors with their stable path names, in graph order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        visit_layers(&self.layers, "l", &mut |path, layer| match layer {
            Layer::Conv(c) => {
                out.push((format!("{path}.weight"), c.weight.clone()));
                if let Some(b) = &c.bias {
                    out.push((format!("{path}.bias"), b.clone()));
                }
            }
            Layer::SeparableConv(s) => {
                out.push((format!("{path}.depthwise"), s.depthwise.clone()));
                out.push((format!("{path}.pointwise"), s.pointwise.clone()));
            }
            Layer::Norm(n) => {
                out.push((format!("{path}.gamma"), n.gamma.clone()));
                out.push((format!("{path}.beta"), n.beta.clone()));
            }
            Layer::Linear(l) => {
                out.push((format!("{path}.weight"), l.weight.clone()));
                out.push((format!("{path}.bias"), l.bias.clone()));
            }
            Layer::Residual(res) => {
                if let Some(proj) = &res.projection {
                    out.push((format!("{path}.proj.weight"), proj.weight.clone()));
                    if let Some(b) = &proj.bias {
                        out.push((format!("{path}.proj.bias"), b.clone()));
                    }
                }
            }
            _ => {}
        });
        out
    }

    /// Normalization running statistics with their stable path names.
    pub fn named_norm_states(&self) -> Vec<(String, NormState)> {
        let mut out = Vec::new();
        visit_layers(&self.layers, "l", &mut |path, layer| {
            if let Layer::Norm(n) = layer {
                out.push((path.to_string(), n.state.read().unwrap().clone()));
            }
        });
        out
    }

    /// Restores running statistics captured by [`Model::named_norm_states`].
    pub(crate) fn restore_norm_states(
        &self,
        states: &std::collections::BTreeMap<String, NormState>,
    ) -> Result<(), SpecError> {
        let mut missing = Vec::new();
        visit_layers(&self.layers, "l", &mut |path, layer| {
            if let Layer::Norm(n) = layer {
                match states.get(path) {
                    Some(state) => *n.state.write().unwrap() = state.clone(),
                    None => missing.push(path.to_string()),
                }
            }
        });
        if let Some(first) = missing.first() {
            return Err(SpecError::Metadata(format!(
                "missing running statistics for {first:?}"
            )));
        }
        Ok(())
    }

    /// Total element count over the parameter list.
    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.num_elements()).sum()
    }

    /// Number of shortcut summations in the graph.
    pub fn residual_count(&self) -> usize {
        let mut count = 0;
        visit_layers(&self.layers, "l", &mut |_, layer| {
            if matches!(layer, Layer::Residual(_)) {
                count += 1;
            }
        });
        count
    }
}

/// Depth-first walk over the layer tree with stable path names.
fn visit_layers(layers: &[Layer], prefix: &str, f: &mut impl FnMut(&str, &Layer)) {
    for (i, layer) in layers.iter().enumerate() {
        let path = format!("{prefix}{i}");
        f(&path, layer);
        match layer {
            Layer::Residual(res) => {
                visit_layers(&res.body, &format!("{path}.body"), f);
            }
            Layer::DenseBlock(block) => {
                for (j, stack) in block.layers.iter().enumerate() {
                    visit_layers(stack, &format!("{path}.layer{j}."), f);
                }
            }
            _ => {}
        }
    }
}

// ---- initialization ----

/// Fan-in-scaled uniform initializer over one seeded stream; the draw order
/// is the layer construction order, which pins initial weights bit-for-bit
/// for a given (spec, seed).
pub(crate) struct Init {
    rng: SplitMix64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: SplitMix64::new(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len)
            .map(|_| self.rng.next_range(-bound, bound))
            .collect();
        Tensor::param(shape, data).expect("init shape")
    }

    pub fn conv(
        &mut self,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> ConvLayer {
        let weight = self.uniform(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel);
        let bias = bias.then(|| Tensor::param(&[c_out], vec![0.0; c_out]).unwrap());
        ConvLayer {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn separable(
        &mut self,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> SeparableConvLayer {
        let depthwise = self.uniform(&[c_in, 1, kernel, kernel], kernel * kernel);
        let pointwise = self.uniform(&[c_out, c_in, 1, 1], c_in);
        SeparableConvLayer {
            depthwise,
            pointwise,
            stride,
            padding,
        }
    }

    pub fn norm(&mut self, channels: usize) -> NormLayer {
        NormLayer {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).unwrap(),
            beta: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            state: RwLock::new(NormState::new(channels)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn linear(&mut self, d_in: usize, d_out: usize) -> LinearLayer {
        LinearLayer {
            weight: self.uniform(&[d_out, d_in], d_in),
            bias: Tensor::param(&[d_out], vec![0.0; d_out]).unwrap(),
        }
    }
}
