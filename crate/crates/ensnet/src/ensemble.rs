//! Sum-fusion of per-model class probabilities.
//!
//! The fusion rule is deliberately plain: add the probability vectors the
//! member models emit for a sample, then take the class with the largest
//! summed score. Summing is not majority voting; a single confident model
//! can outvote two lukewarm ones. Scores are never renormalized before the
//! argmax because positive scaling cannot change which class wins.

use thiserror::Error;

use crate::arch::Model;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class count mismatch: expected {expected}, got {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },
    #[error("incompatible ensemble: {0}")]
    IncompatibleModels(String),
    #[error("sample id mismatch: {0}")]
    SampleIdMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A probability distribution over the classes: non-negative entries that
/// sum to one (within 1e-6).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EnsembleError> {
        if values.is_empty() {
            return Err(EnsembleError::InvalidArgument(
                "probability vector needs at least one class".into(),
            ));
        }
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(EnsembleError::InvalidArgument(format!(
                "probabilities must be non-negative, got {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(EnsembleError::InvalidArgument(format!(
                "probabilities must sum to 1 (got {sum})"
            )));
        }
        Ok(ProbVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn argmax(&self) -> usize {
        argmax_lowest_index(&self.values)
    }
}

/// Elementwise sum of the member probability vectors for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScores {
    values: Vec<f64>,
    model_count: usize,
}

impl FusedScores {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn model_count(&self) -> usize {
        self.model_count
    }
}

fn argmax_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adds the probability vectors elementwise. The result is independent of
/// the input order.
pub fn fuse_sum(probs: &[ProbVector]) -> Result<FusedScores, EnsembleError> {
    let first = probs.first().ok_or_else(|| {
        EnsembleError::InvalidArgument("fuse_sum needs at least one probability vector".into())
    })?;
    let k = first.classes();
    let mut values = vec![0.0; k];
    for pv in probs {
        if pv.classes() != k {
            return Err(EnsembleError::ClassCountMismatch {
                expected: k,
                actual: pv.classes(),
            });
        }
        for (acc, v) in values.iter_mut().zip(pv.values()) {
            *acc += v;
        }
    }
    Ok(FusedScores {
        values,
        model_count: probs.len(),
    })
}

/// Index of the largest fused score; ties go to the lowest class index.
pub fn argmax_class(scores: &FusedScores) -> usize {
    argmax_lowest_index(&scores.values)
}

/// Per-sample ensemble prediction over a batch: softmax each member model's
/// logits, sum the probabilities, take the argmax.
///
/// Member outputs are consumed in the given model order so the floating
/// point sums are bit-reproducible.
pub fn predict_ensemble(models: &[&Model], batch: &Tensor) -> Result<Vec<usize>, EnsembleError> {
    let first = models.first().ok_or_else(|| {
        EnsembleError::InvalidArgument("predict_ensemble needs at least one model".into())
    })?;
    for m in models {
        if m.num_classes() != first.num_classes() {
            return Err(EnsembleError::IncompatibleModels(format!(
                "class counts differ: {} ({}) vs {} ({})",
                first.family(),
                first.num_classes(),
                m.family(),
                m.num_classes()
            )));
        }
        if m.input_resolution() != first.input_resolution() {
            return Err(EnsembleError::IncompatibleModels(format!(
                "input resolutions differ: {} ({}) vs {} ({})",
                first.family(),
                first.input_resolution(),
                m.family(),
                m.num_classes()
            )));
        }
    }
    let n = batch.shape()[0];
    let k = first.num_classes();
    let mut per_model: Vec<Vec<f64>> = Vec::with_capacity(models.len());
    for m in models {
        let probs = m.forward(batch)?.softmax()?;
        per_model.push(probs.data());
    }
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let vectors: Vec<ProbVector> = per_model
            .iter()
            .map(|p| ProbVector::new(p[i * k..(i + 1) * k].to_vec()))
            .collect::<Result<_, _>>()?;
        predictions.push(argmax_class(&fuse_sum(&vectors)?));
    }
    Ok(predictions)
}

/// One parsed probability CSV: `sample_id,p0,...,p{K-1}` with a header row.
#[derive(Debug, Clone)]
pub struct ProbabilityFile {
    pub sample_ids: Vec<String>,
    pub probs: Vec<ProbVector>,
}

impl ProbabilityFile {
    /// Parses CSV text. The header fixes K; every row must carry exactly
    /// K probabilities that form a valid distribution.
    pub fn parse(text: &str) -> Result<Self, EnsembleError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| EnsembleError::InvalidArgument("empty probability file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "sample_id" {
            return Err(EnsembleError::InvalidArgument(format!(
                "bad probability header: {header:?}"
            )));
        }
        let k = cols.len() - 1;
        for (i, col) in cols[1..].iter().enumerate() {
            if *col != format!("p{i}") {
                return Err(EnsembleError::InvalidArgument(format!(
                    "bad probability header column {}: expected p{i}, got {col:?}",
                    i + 1
                )));
            }
        }
        let mut sample_ids = Vec::new();
        let mut probs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != k + 1 {
                return Err(EnsembleError::InvalidArgument(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 2,
                    k + 1,
                    fields.len()
                )));
            }
            let values: Vec<f64> = fields[1..]
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        EnsembleError::InvalidArgument(format!(
                            "line {}: bad probability {f:?}",
                            lineno + 2
                        ))
                    })
                })
                .collect::<Result<_, _>>()?;
            sample_ids.push(fields[0].to_string());
            probs.push(ProbVector::new(values)?);
        }
        Ok(ProbabilityFile { sample_ids, probs })
    }
}

/// Offline fusion of per-model probability files. All files must list the
/// same sample ids in the same order with the same class count; the result
/// pairs each sample id with its fused prediction.
pub fn fuse_probability_files(
    files: &[ProbabilityFile],
) -> Result<Vec<(String, usize)>, EnsembleError> {
    let first = files.first().ok_or_else(|| {
        EnsembleError::InvalidArgument("need at least one probability file".into())
    })?;
    for file in files {
        if file.sample_ids.len() != first.sample_ids.len() {
            return Err(EnsembleError::SampleIdMismatch(format!(
                "files list {} vs {} samples",
                first.sample_ids.len(),
                file.sample_ids.len()
            )));
        }
        for (a, b) in first.sample_ids.iter().zip(&file.sample_ids) {
            if a != b {
                return Err(EnsembleError::SampleIdMismatch(format!(
                    "first offending id: {a:?} vs {b:?}"
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(first.sample_ids.len());
    for i in 0..first.sample_ids.len() {
        let vectors: Vec<ProbVector> = files.iter().map(|f| f.probs[i].clone()).collect();
        out.push((
            first.sample_ids[i].clone(),
            argmax_class(&fuse_sum(&vectors)?),
        ));
    }
    Ok(out)
}
