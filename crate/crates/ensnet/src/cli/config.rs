//! The experiment config file: flat, line-oriented `section.key = value`.
//!
//! `#` starts a comment and blank lines are ignored. Every key has a
//! default, so a config file only states what differs from the toy setup.
//! Unknown keys are errors; diagnostics carry the line number and key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arch::{ArchSpec, DenseSpec, EffSpec, Family, XceptionSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { per_class: usize },
    Files { dir: PathBuf, annotations: PathBuf },
}

/// Everything an experiment needs: dataset source, patch resolution, the
/// three architecture specs, the training regimen, and the output location.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_source: DataSource,
    /// Dataset synthesis seed; defaults to a stream derived from `seed`.
    pub data_seed: Option<u64>,
    pub resolution: usize,
    pub test_fraction: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub xception: XceptionSpec,
    pub densenet: DenseSpec,
    pub efficientnet: EffSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Master experiment seed; init, shuffle, split, and (by default) data
    /// seeds all derive from it on separate streams.
    pub seed: u64,
    pub shuffle: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_source: DataSource::Synthetic { per_class: 40 },
            data_seed: None,
            resolution: 16,
            test_fraction: 0.5,
            num_classes: 3,
            in_channels: 1,
            xception: XceptionSpec::toy(),
            densenet: DenseSpec::toy(),
            efficientnet: EffSpec::toy(),
            learning_rate: 0.001,
            epochs: 60,
            batch_size: 10,
            seed: 1,
            shuffle: true,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            message: format!("cannot read config: {e}"),
        })?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in diagnostics.
    pub fn from_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let line_err = |line: usize, message: String| ConfigError::Line {
            path: origin.to_string(),
            line,
            message,
        };

        // First pass: collect key -> (value, line), rejecting malformed lines.
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (index, raw) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| line_err(line_no, format!("expected `section.key = value`, got {line:?}")))?;
            let key = key.trim();
            if !key.contains('.') {
                return Err(line_err(
                    line_no,
                    format!("key {key:?} lacks a section prefix"),
                ));
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(line_err(line_no, format!("duplicate key {key:?}")));
            }
        }

        let mut config = ExperimentConfig::default();
        let mut take = |key: &str| entries.remove(key);

        macro_rules! parse {
            ($key:expr, $what:expr) => {
                if let Some((value, line)) = take($key) {
                    Some(value.parse().map_err(|_| {
                        line_err(line, format!("bad {} for {:?}: {value:?}", $what, $key))
                    })?)
                } else {
                    None
                }
            };
        }
        let parse_list = |value: &str, line: usize, key: &str| -> Result<Vec<usize>, ConfigError> {
            value
                .split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        line_err(line, format!("bad integer list for {key:?}: {value:?}"))
                    })
                })
                .collect()
        };

        // data.*
        let source = take("data.source");
        let per_class: Option<usize> = parse!("data.per_class", "integer");
        let dir: Option<PathBuf> = parse!("data.dir", "path");
        let annotations: Option<PathBuf> = parse!("data.annotations", "path");
        config.data_source = match source.as_ref().map(|(v, _)| v.as_str()) {
            None | Some("synthetic") => {
                if let Some((_, line)) = &source {
                    if dir.is_some() {
                        return Err(line_err(*line, "data.dir is only for data.source = files".into()));
                    }
                }
                DataSource::Synthetic {
                    per_class: per_class.unwrap_or(40),
                }
            }
            Some("files") => {
                let (_, line) = source.as_ref().unwrap();
                let dir = dir.ok_or_else(|| {
                    line_err(*line, "data.source = files needs data.dir".into())
                })?;
                let annotations = annotations.unwrap_or_else(|| dir.join("annotations.csv"));
                DataSource::Files { dir, annotations }
            }
            Some(other) => {
                let (_, line) = source.as_ref().unwrap();
                return Err(line_err(
                    *line,
                    format!("data.source must be `synthetic` or `files`, got {other:?}"),
                ));
            }
        };
        if let Some(seed) = parse!("data.seed", "integer") {
            config.data_seed = Some(seed);
        }
        if let Some(r) = parse!("data.resolution", "integer") {
            config.resolution = r;
        }
        if let Some(f) = parse!("data.test_fraction", "number") {
            config.test_fraction = f;
        }

        // model.*
        if let Some(k) = parse!("model.num_classes", "integer") {
            config.num_classes = k;
        }
        if let Some(c) = parse!("model.in_channels", "integer") {
            config.in_channels = c;
        }

        // xception.*
        if let Some(v) = parse!("xception.num_modules", "integer") {
            config.xception.num_modules = v;
        }
        if let Some(v) = parse!("xception.stem_channels", "integer") {
            config.xception.stem_channels = v;
        }
        if let Some((value, line)) = take("xception.channels") {
            config.xception.channels_per_module = parse_list(&value, line, "xception.channels")?;
        }
        if let Some(v) = parse!("xception.kernel_size", "integer") {
            config.xception.kernel_size = v;
        }

        // densenet.*
        if let Some(v) = parse!("densenet.growth_rate", "integer") {
            config.densenet.growth_rate = v;
        }
        if let Some((value, line)) = take("densenet.blocks") {
            config.densenet.block_layout = parse_list(&value, line, "densenet.blocks")?;
        }
        if let Some(v) = parse!("densenet.initial_channels", "integer") {
            config.densenet.initial_channels = v;
        }
        if let Some(v) = parse!("densenet.compression", "number") {
            config.densenet.compression = v;
        }

        // efficientnet.*
        if let Some(v) = parse!("efficientnet.phi", "number") {
            config.efficientnet.phi = v;
        }
        if let Some(v) = parse!("efficientnet.alpha", "number") {
            config.efficientnet.alpha = v;
        }
        if let Some(v) = parse!("efficientnet.beta", "number") {
            config.efficientnet.beta = v;
        }
        if let Some(v) = parse!("efficientnet.gamma", "number") {
            config.efficientnet.gamma = v;
        }
        if let Some((value, line)) = take("efficientnet.base_repeats") {
            config.efficientnet.base_repeats =
                parse_list(&value, line, "efficientnet.base_repeats")?;
        }
        if let Some((value, line)) = take("efficientnet.base_widths") {
            config.efficientnet.base_widths =
                parse_list(&value, line, "efficientnet.base_widths")?;
        }
        if let Some(v) = parse!("efficientnet.base_resolution", "integer") {
            config.efficientnet.base_resolution = v;
        } else {
            config.efficientnet.base_resolution = config.resolution;
        }

        // train.*
        if let Some(v) = parse!("train.learning_rate", "number") {
            config.learning_rate = v;
        }
        if let Some(v) = parse!("train.epochs", "integer") {
            config.epochs = v;
        }
        if let Some(v) = parse!("train.batch_size", "integer") {
            config.batch_size = v;
        }
        if let Some(v) = parse!("train.seed", "integer") {
            config.seed = v;
        }
        if let Some((value, line)) = take("train.shuffle") {
            config.shuffle = match value.as_str() {
                "true" | "on" | "1" => true,
                "false" | "off" | "0" => false,
                other => {
                    return Err(line_err(
                        line,
                        format!("bad flag for \"train.shuffle\": {other:?}"),
                    ))
                }
            };
        }

        // output.*
        if let Some(v) = parse!("output.dir", "path") {
            config.output_dir = v;
        }

        if let Some((key, (_, line))) = entries.into_iter().next() {
            return Err(line_err(line, format!("unknown key {key:?}")));
        }

        config.finish(origin)
    }

    /// Propagates shared fields into the specs and checks cross-field
    /// consistency.
    fn finish(mut self, origin: &str) -> Result<Self, ConfigError> {
        let file_err = |message: String| ConfigError::File {
            path: origin.to_string(),
            message,
        };
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(file_err(format!(
                "data.test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if matches!(self.data_source, DataSource::Synthetic { .. }) && self.resolution < 8 {
            return Err(file_err(format!(
                "synthetic data needs data.resolution >= 8, got {}",
                self.resolution
            )));
        }

        self.xception.num_classes = self.num_classes;
        self.xception.in_channels = self.in_channels;
        self.xception.input_resolution = self.resolution;
        self.densenet.num_classes = self.num_classes;
        self.densenet.in_channels = self.in_channels;
        self.densenet.input_resolution = self.resolution;
        self.efficientnet.num_classes = self.num_classes;
        self.efficientnet.in_channels = self.in_channels;

        let scaled = self.efficientnet.scaled_resolution();
        if scaled != self.resolution {
            return Err(file_err(format!(
                "efficientnet scaled resolution {scaled} does not match data.resolution {}; \
                 adjust efficientnet.base_resolution / gamma / phi",
                self.resolution
            )));
        }
        Ok(self)
    }

    pub fn spec_for(&self, family: Family) -> ArchSpec {
        match family {
            Family::Xception => ArchSpec::Xception(self.xception.clone()),
            Family::DenseNet => ArchSpec::Dense(self.densenet.clone()),
            Family::EfficientNet => ArchSpec::Efficient(self.efficientnet.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        let config = ExperimentConfig::from_text("", "test").unwrap();
        assert_eq!(config, ExperimentConfig::default());
    }

    #[test]
    fn full_config_parses() {
        let text = "\
# experiment
data.source = synthetic
data.per_class = 20
data.resolution = 16
data.test_fraction = 0.5
data.seed = 99

model.num_classes = 3
model.in_channels = 1

xception.num_modules = 4
xception.stem_channels = 8
xception.channels = 8,16,16,32
xception.kernel_size = 3

densenet.growth_rate = 4
densenet.blocks = 2,2
densenet.initial_channels = 8
densenet.compression = 0.5

efficientnet.phi = 0
efficientnet.alpha = 1.2
efficientnet.beta = 1.1
efficientnet.gamma = 1.0
efficientnet.base_repeats = 1,2,2
efficientnet.base_widths = 8,16,32
efficientnet.base_resolution = 16

train.learning_rate = 0.001
train.epochs = 30
train.batch_size = 10
train.seed = 7
train.shuffle = true

output.dir = results
";
        let config = ExperimentConfig::from_text(text, "test").unwrap();
        assert_eq!(config.data_seed, Some(99));
        assert_eq!(config.epochs, 30);
        assert_eq!(config.seed, 7);
        assert_eq!(config.output_dir, PathBuf::from("results"));
        assert_eq!(config.xception.input_resolution, 16);
        assert_eq!(config.densenet.num_classes, 3);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = ExperimentConfig::from_text("train.epochs = 5\ntrain.typo = 3\n", "cfg")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg:2"), "{msg}");
        assert!(msg.contains("train.typo"), "{msg}");
    }

    #[test]
    fn bad_value_names_line_and_key() {
        let err = ExperimentConfig::from_text("train.epochs = soon\n", "cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg:1"), "{msg}");
        assert!(msg.contains("train.epochs"), "{msg}");
    }

    #[test]
    fn missing_section_prefix_rejected() {
        let err = ExperimentConfig::from_text("epochs = 5\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("section"), "{err}");
    }

    #[test]
    fn files_source_needs_dir() {
        let err = ExperimentConfig::from_text("data.source = files\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("data.dir"), "{err}");
    }

    #[test]
    fn efficientnet_resolution_must_match_data() {
        let text = "efficientnet.base_resolution = 32\n";
        let err = ExperimentConfig::from_text(text, "cfg").unwrap_err();
        assert!(err.to_string().contains("scaled resolution"), "{err}");
    }

    #[test]
    fn resolution_propagates_when_base_unset() {
        let config = ExperimentConfig::from_text("data.resolution = 24\n", "cfg").unwrap();
        assert_eq!(config.efficientnet.base_resolution, 24);
        assert_eq!(config.xception.input_resolution, 24);
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = ExperimentConfig::from_text("train.epochs = 5\ntrain.epochs = 6\n", "cfg")
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }
}
