//! Builder for the compound-scaled family.
//!
//! The base layout lists per-stage block counts and widths; `phi` with the
//! `(alpha, beta, gamma)` multipliers expands depth, width, and input
//! resolution together (see [`EffSpec`] for the rounding rules). Each block
//! is `separable conv -> norm -> swish`; the first block of every stage
//! after the first downsamples at stride 2, and any block that keeps its
//! shape gets a shortcut summation.

use super::{ArchSpec, EffSpec, Init, Layer, Model, ResidualLayer, SpecError};
use crate::tensor::Activation;

const KERNEL: usize = 3;

fn validate(spec: &EffSpec) -> Result<(), SpecError> {
    if spec.phi < 0.0 {
        return Err(SpecError::Invalid(format!(
            "phi must be non-negative, got {}",
            spec.phi
        )));
    }
    for (name, v) in [("alpha", spec.alpha), ("beta", spec.beta), ("gamma", spec.gamma)] {
        if v < 1.0 {
            return Err(SpecError::Invalid(format!("{name} must be >= 1, got {v}")));
        }
    }
    if spec.base_repeats.is_empty() || spec.base_repeats.len() != spec.base_widths.len() {
        return Err(SpecError::Invalid(format!(
            "base_repeats ({}) and base_widths ({}) must be non-empty and equal length",
            spec.base_repeats.len(),
            spec.base_widths.len()
        )));
    }
    if spec.base_repeats.iter().any(|&r| r == 0) || spec.base_widths.iter().any(|&w| w == 0) {
        return Err(SpecError::Invalid(
            "base repeats and widths must be positive".into(),
        ));
    }
    if spec.num_classes == 0 || spec.in_channels == 0 {
        return Err(SpecError::Invalid(
            "num_classes and in_channels must be positive".into(),
        ));
    }
    let resolution = spec.scaled_resolution();
    if resolution < KERNEL {
        return Err(SpecError::Invalid(format!(
            "scaled resolution {resolution} smaller than kernel size {KERNEL}"
        )));
    }
    Ok(())
}

pub fn build_efficientnet_like(spec: &EffSpec, seed: u64) -> Result<Model, SpecError> {
    validate(spec)?;
    let mut init = Init::new(seed);
    let repeats = spec.scaled_repeats();
    let widths = spec.scaled_widths();
    let resolution = spec.scaled_resolution();
    let pad = (KERNEL - 1) / 2;

    let mut layers = Vec::new();
    layers.push(Layer::Conv(init.conv(
        spec.in_channels,
        widths[0],
        KERNEL,
        1,
        pad,
        true,
    )));

    let mut c_prev = widths[0];
    for (stage, (&count, &width)) in repeats.iter().zip(&widths).enumerate() {
        for block in 0..count {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let c_in = if block == 0 { c_prev } else { width };
            let body = vec![
                Layer::SeparableConv(init.separable(c_in, width, KERNEL, stride, pad)),
                Layer::Norm(init.norm(width)),
                Layer::Activation(Activation::Swish),
            ];
            if stride == 1 && c_in == width {
                layers.push(Layer::Residual(ResidualLayer {
                    body,
                    projection: None,
                }));
            } else {
                layers.extend(body);
            }
        }
        c_prev = width;
    }

    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(init.linear(c_prev, spec.num_classes)));

    Ok(Model::from_parts(
        ArchSpec::Efficient(spec.clone()),
        resolution,
        layers,
    ))
}
