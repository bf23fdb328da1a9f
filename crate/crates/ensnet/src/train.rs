//! Plain stochastic gradient descent with deterministic data order.
//!
//! The loop is epochs of shuffle -> minibatch forward -> cross-entropy ->
//! backward -> step -> zero-grad. There is no momentum, weight decay,
//! schedule, or augmentation. Shuffling draws from its own stream derived
//! from the config seed, independent of weight initialization, so data order
//! and init can be varied separately. Given the same seed, initial model,
//! and dataset, every reported number is bit-identical across runs.

use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::arch::Model;
use crate::data::{batch_from_samples, RoiSample};
use crate::ensemble::ProbVector;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{cross_entropy, Tensor, TensorError};

const SHUFFLE_STREAM: u64 = 0x51;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 10,
            seed: 0,
            shuffle: true,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidArgument(
                "batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-run summary; one loss/accuracy entry per epoch.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_accuracies: Vec<f64>,
    pub final_checksum: u64,
    pub elapsed_seconds: f64,
}

/// One gradient-descent update: `w <- w - lr * grad` for every parameter.
/// Gradients are left untouched; the caller zeroes them.
pub fn sgd_step(params: &[Tensor], learning_rate: f64) -> Result<(), TrainError> {
    for param in params {
        let Some(grad) = param.grad() else {
            return Err(TrainError::InvalidState(format!(
                "parameter of shape {:?} has no gradient; run backward first",
                param.shape()
            )));
        };
        if learning_rate == 0.0 {
            continue;
        }
        let mut data = param.data();
        for (w, g) in data.iter_mut().zip(&grad) {
            *w -= learning_rate * g;
        }
        param.set_data(data);
    }
    Ok(())
}

/// FNV-1a over the little-endian bytes of every parameter, in graph order.
pub fn parameter_checksum(model: &Model) -> u64 {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    for param in model.parameters() {
        for v in param.data() {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    }
    hash
}

/// Runs the SGD loop over the training samples, mutating the model in
/// place. Writes a checkpoint at the end when the config names one.
pub fn train_model(
    model: &mut Model,
    train_set: &[RoiSample],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::InvalidArgument("empty training set".into()));
    }
    for sample in train_set {
        if sample.label >= model.num_classes() {
            return Err(TrainError::InvalidArgument(format!(
                "label {} out of range for {} classes ({})",
                sample.label,
                model.num_classes(),
                sample.source_id
            )));
        }
    }

    let start = Instant::now();
    let params = model.parameters();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = SplitMix64::new(derive_seed(config.seed, SHUFFLE_STREAM));

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_accuracies = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            shuffle_rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<&RoiSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (batch, labels) = batch_from_samples(&samples);
            let logits = model.forward_train(&batch)?;
            let loss = cross_entropy(&logits, &labels)?;
            let loss_value = loss.value();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                });
            }
            loss_sum += loss_value * labels.len() as f64;
            correct += count_correct(&logits.data(), &labels);
            loss.backward()?;
            sgd_step(&params, config.learning_rate)?;
            for param in &params {
                param.zero_grad();
            }
        }
        epoch_losses.push(loss_sum / train_set.len() as f64);
        epoch_accuracies.push(correct as f64 / train_set.len() as f64);
    }

    if let Some(path) = &config.checkpoint_path {
        crate::checkpoint::save_checkpoint(model, path)?;
    }

    Ok(TrainReport {
        epoch_losses,
        epoch_accuracies,
        final_checksum: parameter_checksum(model),
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

fn count_correct(logits: &[f64], labels: &[usize]) -> usize {
    let k = logits.len() / labels.len();
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &label)| {
            let row = &logits[n * k..(n + 1) * k];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}

/// Inference over a test set: per-sample class probabilities and argmax
/// predictions, in dataset order.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub probabilities: Vec<ProbVector>,
}

pub fn evaluate_model(model: &Model, test_set: &[RoiSample]) -> Result<Evaluation, TrainError> {
    if test_set.is_empty() {
        return Err(TrainError::InvalidArgument("empty test set".into()));
    }
    let k = model.num_classes();
    let mut predictions = Vec::with_capacity(test_set.len());
    let mut probabilities = Vec::with_capacity(test_set.len());
    for chunk in test_set.chunks(32) {
        let samples: Vec<&RoiSample> = chunk.iter().collect();
        let (batch, _) = batch_from_samples(&samples);
        let probs = model.forward(&batch)?.softmax()?.data();
        for n in 0..chunk.len() {
            let row = probs[n * k..(n + 1) * k].to_vec();
            let pv = ProbVector::new(row).map_err(|e| {
                TrainError::InvalidState(format!("model emitted a bad distribution: {e}"))
            })?;
            predictions.push(pv.argmax());
            probabilities.push(pv);
        }
    }
    Ok(Evaluation {
        predictions,
        probabilities,
    })
}
