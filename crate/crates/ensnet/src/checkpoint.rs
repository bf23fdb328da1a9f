//! Model checkpoints: the binary container with magic `ENSB`.
//!
//! The metadata block stores the architecture spec in its canonical text
//! form; parameters go in the first record section and normalization
//! running statistics (as `<norm path>.running_mean` / `.running_var`) in
//! the second. Loading rebuilds the model from the caller's spec, checks it
//! against the stored metadata, and overwrites every tensor, so a round
//! trip reproduces forward outputs exactly.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::arch::{ArchSpec, Model, SpecError};
use crate::container::{self, Container, ContainerError, Record};
use crate::tensor::NormState;

const MAGIC: &[u8; 4] = b"ENSB";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Spec(#[from] SpecError),
}

fn convert(err: ContainerError, path: &Path) -> CheckpointError {
    match err {
        ContainerError::Io(source) => CheckpointError::Io {
            path: path.display().to_string(),
            source,
        },
        other => CheckpointError::Corrupt(other.to_string()),
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let records = model
        .named_parameters()
        .into_iter()
        .map(|(name, tensor)| Record {
            name,
            extents: tensor.shape(),
            data: tensor.data(),
        })
        .collect();
    let mut extra = Vec::new();
    for (name, state) in model.named_norm_states() {
        extra.push(Record {
            name: format!("{name}.running_mean"),
            extents: vec![state.running_mean.len()],
            data: state.running_mean,
        });
        extra.push(Record {
            name: format!("{name}.running_var"),
            extents: vec![state.running_var.len()],
            data: state.running_var,
        });
    }
    let container = Container {
        metadata: model.spec().to_metadata(),
        records,
        extra,
    };
    container::write_file(path, MAGIC, VERSION, &container).map_err(|e| convert(e, path))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    spec: &ArchSpec,
) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let container = container::read_file(path, MAGIC, VERSION).map_err(|e| convert(e, path))?;

    let stored = ArchSpec::from_metadata(&container.metadata)
        .map_err(|e| CheckpointError::Corrupt(format!("bad metadata: {e}")))?;
    if stored != *spec {
        return Err(CheckpointError::Incompatible(format!(
            "stored model is a {} with different settings than the requested {}",
            stored.family(),
            spec.family()
        )));
    }

    // Seed is irrelevant: every parameter is overwritten below.
    let model = spec.build(0)?;

    let mut stored_params: BTreeMap<String, Record> = container
        .records
        .into_iter()
        .map(|r| (r.name.clone(), r))
        .collect();
    for (name, tensor) in model.named_parameters() {
        let record = stored_params.remove(&name).ok_or_else(|| {
            CheckpointError::Incompatible(format!("checkpoint lacks parameter {name:?}"))
        })?;
        if record.extents != tensor.shape() {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {name:?} has shape {:?} in the checkpoint but {:?} in the spec",
                record.extents,
                tensor.shape()
            )));
        }
        tensor.set_data(record.data);
    }
    if let Some(name) = stored_params.keys().next() {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint carries unknown parameter {name:?}"
        )));
    }

    let mut stats: BTreeMap<String, Record> = container
        .extra
        .into_iter()
        .map(|r| (r.name.clone(), r))
        .collect();
    let mut states: BTreeMap<String, NormState> = BTreeMap::new();
    let names: Vec<String> = stats
        .keys()
        .filter_map(|k| k.strip_suffix(".running_mean").map(str::to_string))
        .collect();
    for name in names {
        let mean = stats.remove(&format!("{name}.running_mean")).unwrap();
        let var = stats
            .remove(&format!("{name}.running_var"))
            .ok_or_else(|| {
                CheckpointError::Corrupt(format!("missing running variance for {name:?}"))
            })?;
        states.insert(
            name,
            NormState {
                running_mean: mean.data,
                running_var: var.data,
            },
        );
    }
    if let Some(name) = stats.keys().next() {
        return Err(CheckpointError::Corrupt(format!(
            "stray running statistic {name:?}"
        )));
    }
    model.restore_norm_states(&states)?;
    Ok(model)
}
