//! Builder for the separable-conv residual family.
//!
//! Stem convolution, then `num_modules` modules of
//! `[relu -> separable conv -> norm] x 2`. Every module except the first
//! and last wraps its pair in a shortcut summation; when the module changes
//! the channel count the shortcut goes through a 1x1 projection. The head
//! is a global average pool into the class projection. Spatial extent is
//! preserved throughout (stride 1, same padding).

use super::{ArchSpec, Init, Layer, Model, ResidualLayer, SpecError, XceptionSpec};
use crate::tensor::Activation;

fn validate(spec: &XceptionSpec) -> Result<(), SpecError> {
    if spec.num_modules < 2 {
        return Err(SpecError::Invalid(format!(
            "xception-like needs at least 2 modules so the first/last rule is well defined, got {}",
            spec.num_modules
        )));
    }
    if spec.channels_per_module.len() != spec.num_modules {
        return Err(SpecError::Invalid(format!(
            "channels_per_module has {} entries for {} modules",
            spec.channels_per_module.len(),
            spec.num_modules
        )));
    }
    if spec.channels_per_module.iter().any(|&c| c == 0) || spec.stem_channels == 0 {
        return Err(SpecError::Invalid("channel counts must be positive".into()));
    }
    if spec.kernel_size == 0 || spec.kernel_size % 2 == 0 {
        return Err(SpecError::Invalid(format!(
            "kernel_size must be odd, got {}",
            spec.kernel_size
        )));
    }
    if spec.input_resolution < spec.kernel_size {
        return Err(SpecError::Invalid(format!(
            "input resolution {} smaller than kernel size {}",
            spec.input_resolution, spec.kernel_size
        )));
    }
    if spec.num_classes == 0 || spec.in_channels == 0 {
        return Err(SpecError::Invalid(
            "num_classes and in_channels must be positive".into(),
        ));
    }
    Ok(())
}

pub fn build_xception_like(spec: &XceptionSpec, seed: u64) -> Result<Model, SpecError> {
    validate(spec)?;
    let mut init = Init::new(seed);
    let k = spec.kernel_size;
    let pad = (k - 1) / 2;

    let mut layers = Vec::new();
    layers.push(Layer::Conv(init.conv(
        spec.in_channels,
        spec.stem_channels,
        k,
        1,
        pad,
        true,
    )));

    let mut c_prev = spec.stem_channels;
    let last = spec.num_modules - 1;
    for (i, &c) in spec.channels_per_module.iter().enumerate() {
        let body = vec![
            Layer::Activation(Activation::Relu),
            Layer::SeparableConv(init.separable(c_prev, c, k, 1, pad)),
            Layer::Norm(init.norm(c)),
            Layer::Activation(Activation::Relu),
            Layer::SeparableConv(init.separable(c, c, k, 1, pad)),
            Layer::Norm(init.norm(c)),
        ];
        if i == 0 || i == last {
            layers.extend(body);
        } else {
            let projection = (c_prev != c).then(|| init.conv(c_prev, c, 1, 1, 0, false));
            layers.push(Layer::Residual(ResidualLayer { body, projection }));
        }
        c_prev = c;
    }

    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(init.linear(c_prev, spec.num_classes)));

    Ok(Model::from_parts(
        ArchSpec::Xception(spec.clone()),
        spec.input_resolution,
        layers,
    ))
}
