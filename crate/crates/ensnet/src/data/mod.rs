//! ROI patch datasets: PGM ingestion with annotation-driven cropping, a
//! deterministic synthetic three-class generator, and stratified splits.
//!
//! The synthetic generator only uses the portable integer RNG and IEEE-exact
//! arithmetic (add, multiply, divide, sqrt), so a seed produces bit-identical
//! pixels on every platform.

mod cache;
mod pgm;
mod roi;

pub use cache::{load_dataset, save_dataset};
pub use roi::extract_roi;

use std::path::Path;

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// The three target classes, in label order.
pub const CLASS_NAMES: [&str; 3] = ["normal", "benign", "malignant"];

pub fn label_from_name(name: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name.trim()))
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported format at byte {offset}: {reason}")]
    UnsupportedFormat { offset: usize, reason: String },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("corrupt dataset cache: {0}")]
    CorruptCache(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Grayscale raster with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Reads an 8-bit binary PGM ("P5") file, scaling values to [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage, DataError> {
    pgm::load(path.as_ref())
}

/// Writes a grayscale image as 8-bit binary PGM.
pub fn save_image(path: impl AsRef<Path>, image: &GrayImage) -> Result<(), DataError> {
    pgm::save(path.as_ref(), image)
}

/// One ROI annotation: a square window of side `2 * radius` centered at
/// `(cx, cy)` in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub image: String,
    pub cx: i64,
    pub cy: i64,
    pub radius: i64,
    pub label: usize,
}

/// Parses an annotation CSV with header `image,cx,cy,radius,label`. Labels
/// are class names, matched case-insensitively.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::InvalidAnnotation("empty annotation file".into()))?;
    let expect = "image,cx,cy,radius,label";
    if header.trim() != expect {
        return Err(DataError::InvalidAnnotation(format!(
            "bad header {header:?}, expected {expect:?}"
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DataError::InvalidAnnotation(format!(
                "line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_int = |field: &str, what: &str| {
            field.trim().parse::<i64>().map_err(|_| {
                DataError::InvalidAnnotation(format!(
                    "line {}: bad {what} {field:?}",
                    lineno + 1
                ))
            })
        };
        let label = label_from_name(fields[4]).ok_or_else(|| {
            DataError::InvalidAnnotation(format!(
                "line {}: unknown class {:?} (expected one of {:?})",
                lineno + 1,
                fields[4],
                CLASS_NAMES
            ))
        })?;
        out.push(Annotation {
            image: fields[0].trim().to_string(),
            cx: parse_int(fields[1], "cx")?,
            cy: parse_int(fields[2], "cy")?,
            radius: parse_int(fields[3], "radius")?,
            label,
        });
    }
    Ok(out)
}

/// A single grayscale ROI patch with its class label.
#[derive(Debug, Clone)]
pub struct RoiSample {
    /// `[1, H, W]` tensor with values in [0, 1].
    pub patch: Tensor,
    /// 0 = normal, 1 = benign, 2 = malignant.
    pub label: usize,
    pub source_id: String,
}

/// A train/test partition, disjoint by `source_id`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<RoiSample>,
    pub test: Vec<RoiSample>,
    pub seed: u64,
    pub class_names: Vec<String>,
}

/// Loads every annotated ROI from a directory of PGM images. Image paths in
/// the annotation file are taken relative to `dir`.
pub fn load_annotated_dataset(
    dir: impl AsRef<Path>,
    annotations: &[Annotation],
    resolution: usize,
) -> Result<Vec<RoiSample>, DataError> {
    let dir = dir.as_ref();
    let mut samples = Vec::with_capacity(annotations.len());
    for ann in annotations {
        let image = load_image(dir.join(&ann.image))?;
        samples.push(extract_roi(&image, ann, resolution)?);
    }
    Ok(samples)
}

// 16 unit direction vectors at equal angular spacing, stored as literals so
// the generator never calls a platform trig function.
const SPIKE_DIRECTIONS: [(f64, f64); 16] = [
    (1.0, 0.0),
    (0.9238795325112867, 0.3826834323650898),
    (0.7071067811865476, 0.7071067811865476),
    (0.3826834323650898, 0.9238795325112867),
    (0.0, 1.0),
    (-0.3826834323650898, 0.9238795325112867),
    (-0.7071067811865476, 0.7071067811865476),
    (-0.9238795325112867, 0.3826834323650898),
    (-1.0, 0.0),
    (-0.9238795325112867, -0.3826834323650898),
    (-0.7071067811865476, -0.7071067811865476),
    (-0.3826834323650898, -0.9238795325112867),
    (0.0, -1.0),
    (0.3826834323650898, -0.9238795325112867),
    (0.7071067811865476, -0.7071067811865476),
    (0.9238795325112867, -0.3826834323650898),
];

fn unit_ramp(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Generates `per_class` samples for each of the three classes at the given
/// square resolution.
///
/// Class 0 is a smooth low-variance background, class 1 adds a bright
/// centered disk with a circumscribed margin, and class 2 adds a bright
/// irregular blob with thin spiculated arms. All randomness comes from the
/// seeded generator.
pub fn synthesize_dataset(seed: u64, per_class: usize, resolution: usize) -> Vec<RoiSample> {
    assert!(per_class >= 1, "need at least one sample per class");
    assert!(resolution >= 8, "resolution too small for the shapes");
    let mut rng = SplitMix64::new(seed);
    let mut samples = Vec::with_capacity(per_class * 3);
    for label in 0..3 {
        for index in 0..per_class {
            let pixels = synthesize_patch(&mut rng, label, resolution);
            let patch = Tensor::from_vec(&[1, resolution, resolution], pixels)
                .expect("generator emits resolution^2 values");
            samples.push(RoiSample {
                patch,
                label,
                source_id: format!("synth-{label}-{index}"),
            });
        }
    }
    samples
}

/// Disk radius used for class-1 masses at a given resolution. Exposed so
/// tests can reason about the bright region analytically.
pub fn benign_disk_radius(resolution: usize) -> f64 {
    resolution as f64 / 4.0
}

fn synthesize_patch(rng: &mut SplitMix64, label: usize, resolution: usize) -> Vec<f64> {
    let r = resolution;
    let extent = (r - 1).max(1) as f64;
    let center = (r as f64 - 1.0) / 2.0;

    let base = rng.next_range(0.25, 0.35);
    let grad_x = rng.next_range(-0.06, 0.06);
    let grad_y = rng.next_range(-0.06, 0.06);

    // Shape parameters are drawn before the per-pixel noise so the draw
    // order is independent of the resolution.
    enum Shape {
        None,
        Disk {
            radius: f64,
            amplitude: f64,
        },
        Spiculated {
            core: f64,
            amplitude: f64,
            spikes: Vec<(f64, f64, f64, f64)>, // (dir_x, dir_y, length, half_width)
        },
    }
    let shape = match label {
        0 => Shape::None,
        1 => Shape::Disk {
            radius: benign_disk_radius(r),
            amplitude: rng.next_range(0.35, 0.5),
        },
        _ => {
            let core = rng.next_range(0.10, 0.14) * r as f64;
            let amplitude = rng.next_range(0.35, 0.5);
            let count = 6 + rng.next_below(5);
            let mut order: Vec<usize> = (0..SPIKE_DIRECTIONS.len()).collect();
            rng.shuffle(&mut order);
            let spikes = order[..count]
                .iter()
                .map(|&d| {
                    let (dx, dy) = SPIKE_DIRECTIONS[d];
                    let length = rng.next_range(0.22, 0.33) * r as f64;
                    let half_width = rng.next_range(0.8, 1.4);
                    (dx, dy, length, half_width)
                })
                .collect();
            Shape::Spiculated {
                core,
                amplitude,
                spikes,
            }
        }
    };

    let mut pixels = vec![0.0; r * r];
    for y in 0..r {
        for x in 0..r {
            let fx = x as f64;
            let fy = y as f64;
            let mut v = base
                + grad_x * (fx / extent - 0.5)
                + grad_y * (fy / extent - 0.5)
                + rng.next_range(-0.02, 0.02);
            let dx = fx - center;
            let dy = fy - center;
            match &shape {
                Shape::None => {}
                Shape::Disk { radius, amplitude } => {
                    let dist = (dx * dx + dy * dy).sqrt();
                    v += amplitude * unit_ramp(radius - dist);
                }
                Shape::Spiculated {
                    core,
                    amplitude,
                    spikes,
                } => {
                    let dist = (dx * dx + dy * dy).sqrt();
                    let mut s = unit_ramp(core - dist);
                    for &(ux, uy, length, half_width) in spikes {
                        let along = dx * ux + dy * uy;
                        if along < 0.0 || along > length {
                            continue;
                        }
                        let perp = (dx * uy - dy * ux).abs();
                        let taper = 1.0 - along / length;
                        let width = half_width * taper + 0.2 * (1.0 - taper);
                        let contrib = unit_ramp((width - perp) / 0.7);
                        if contrib > s {
                            s = contrib;
                        }
                    }
                    v += amplitude * s;
                }
            }
            pixels[y * r + x] = v.clamp(0.0, 1.0);
        }
    }
    pixels
}

/// Stratified split: per class, a seeded shuffle followed by a
/// `round(test_fraction * class_size)` test allocation.
pub fn train_test_split(
    samples: Vec<RoiSample>,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let max_label = samples.iter().map(|s| s.label).max().unwrap_or(0);
    let mut by_class: Vec<Vec<RoiSample>> = (0..=max_label).map(|_| Vec::new()).collect();
    for sample in samples {
        by_class[sample.label].push(sample);
    }
    let mut rng = SplitMix64::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut class_samples) in by_class.into_iter().enumerate() {
        if class_samples.is_empty() {
            continue;
        }
        let size = class_samples.len();
        let test_count = (test_fraction * size as f64).round() as usize;
        if test_count == 0 || test_count == size {
            return Err(DataError::InvalidSplit(format!(
                "class {label} ({}) has {size} samples; test_fraction {test_fraction} \
                 leaves an empty train or test side",
                CLASS_NAMES.get(label).copied().unwrap_or("?")
            )));
        }
        rng.shuffle(&mut class_samples);
        for (i, sample) in class_samples.into_iter().enumerate() {
            if i < test_count {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(DataError::InvalidSplit("empty dataset".into()));
    }
    Ok(DatasetSplit {
        train,
        test,
        seed,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Stacks patches into a `[N, 1, H, W]` batch together with the labels.
pub fn batch_from_samples(samples: &[&RoiSample]) -> (Tensor, Vec<usize>) {
    assert!(!samples.is_empty());
    let shape = samples[0].patch.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend(s.patch.data());
        labels.push(s.label);
    }
    let batch = Tensor::from_vec(&[samples.len(), 1, h, w], data).expect("stacked batch");
    (batch, labels)
}
