//! Builder for the dense-connectivity family.
//!
//! Stem convolution to `initial_channels`, then alternating dense blocks and
//! transitions. Dense layer `j` of a block reads the concatenation of the
//! block input and all previous layer outputs and emits `growth_rate` new
//! channels through `norm -> relu -> 3x3 conv`, so a block turns `C` input
//! channels into `C + L * k`. A transition is a 1x1 convolution down to
//! `floor(compression * C)` channels followed by 2x2 average pooling at
//! stride 2.

use super::{ArchSpec, DenseBlockLayer, DenseSpec, Init, Layer, Model, SpecError};
use crate::tensor::Activation;

fn validate(spec: &DenseSpec) -> Result<(), SpecError> {
    if spec.growth_rate == 0 {
        return Err(SpecError::Invalid("growth_rate must be positive".into()));
    }
    if spec.block_layout.is_empty() || spec.block_layout.iter().any(|&l| l == 0) {
        return Err(SpecError::Invalid(format!(
            "every block needs at least one layer, got {:?}",
            spec.block_layout
        )));
    }
    if spec.initial_channels == 0 {
        return Err(SpecError::Invalid(
            "initial_channels must be positive".into(),
        ));
    }
    if !(spec.compression > 0.0 && spec.compression <= 1.0) {
        return Err(SpecError::Invalid(format!(
            "compression must be in (0, 1], got {}",
            spec.compression
        )));
    }
    if spec.input_resolution < 3 {
        return Err(SpecError::Invalid(format!(
            "input resolution {} smaller than kernel size 3",
            spec.input_resolution
        )));
    }
    if spec.num_classes == 0 || spec.in_channels == 0 {
        return Err(SpecError::Invalid(
            "num_classes and in_channels must be positive".into(),
        ));
    }
    Ok(())
}

pub fn build_densenet_like(spec: &DenseSpec, seed: u64) -> Result<Model, SpecError> {
    validate(spec)?;
    let mut init = Init::new(seed);
    let k = spec.growth_rate;

    let mut layers = Vec::new();
    layers.push(Layer::Conv(init.conv(
        spec.in_channels,
        spec.initial_channels,
        3,
        1,
        1,
        true,
    )));

    let mut channels = spec.initial_channels;
    let mut resolution = spec.input_resolution;
    let block_count = spec.block_layout.len();
    for (bi, &depth) in spec.block_layout.iter().enumerate() {
        let mut stacks = Vec::with_capacity(depth);
        for j in 0..depth {
            let c_in = channels + j * k;
            stacks.push(vec![
                Layer::Norm(init.norm(c_in)),
                Layer::Activation(Activation::Relu),
                Layer::Conv(init.conv(c_in, k, 3, 1, 1, false)),
            ]);
        }
        layers.push(Layer::DenseBlock(DenseBlockLayer { layers: stacks }));
        channels += depth * k;

        if bi + 1 != block_count {
            if resolution % 2 != 0 {
                return Err(SpecError::Invalid(format!(
                    "transition {} (after block {}): spatial size {} not divisible by 2",
                    bi + 1,
                    bi + 1,
                    resolution
                )));
            }
            let compressed = (spec.compression * channels as f64).floor() as usize;
            if compressed == 0 {
                return Err(SpecError::Invalid(format!(
                    "transition {} (after block {}): compression {} of {} channels leaves none",
                    bi + 1,
                    bi + 1,
                    spec.compression,
                    channels
                )));
            }
            layers.push(Layer::Conv(init.conv(channels, compressed, 1, 1, 0, true)));
            layers.push(Layer::AvgPool { size: 2, stride: 2 });
            channels = compressed;
            resolution /= 2;
        }
    }

    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(init.linear(channels, spec.num_classes)));

    Ok(Model::from_parts(
        ArchSpec::Dense(spec.clone()),
        spec.input_resolution,
        layers,
    ))
}
