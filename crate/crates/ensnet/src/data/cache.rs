//! Dataset cache files: the checkpoint container with magic `ENSD`.

use std::path::Path;

use super::{DataError, RoiSample};
use crate::container::{self, Container, ContainerError, Record};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ENSD";
const VERSION: u32 = 1;

fn convert(err: ContainerError, path: &Path) -> DataError {
    match err {
        ContainerError::Io(source) => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        other => DataError::CorruptCache(other.to_string()),
    }
}

/// Writes samples to a cache file. Record names carry the label and source
/// id as `label/source_id`.
pub fn save_dataset(path: impl AsRef<Path>, samples: &[RoiSample]) -> Result<(), DataError> {
    let path = path.as_ref();
    let records = samples
        .iter()
        .map(|s| Record {
            name: format!("{}/{}", s.label, s.source_id),
            extents: s.patch.shape(),
            data: s.patch.data(),
        })
        .collect();
    let container = Container {
        metadata: format!("kind=roi-dataset\ncount={}\n", samples.len()),
        records,
        extra: Vec::new(),
    };
    container::write_file(path, MAGIC, VERSION, &container).map_err(|e| convert(e, path))
}

/// Reads a cache file written by [`save_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<RoiSample>, DataError> {
    let path = path.as_ref();
    let container = container::read_file(path, MAGIC, VERSION).map_err(|e| convert(e, path))?;
    let mut samples = Vec::with_capacity(container.records.len());
    for record in container.records {
        let (label_text, source_id) = record.name.split_once('/').ok_or_else(|| {
            DataError::CorruptCache(format!("record name {:?} lacks a label prefix", record.name))
        })?;
        let label: usize = label_text.parse().map_err(|_| {
            DataError::CorruptCache(format!("bad label in record name {:?}", record.name))
        })?;
        let patch = Tensor::from_vec(&record.extents, record.data)
            .map_err(|e| DataError::CorruptCache(format!("bad patch record: {e}")))?;
        samples.push(RoiSample {
            patch,
            label,
            source_id: source_id.to_string(),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.ensd");
        let samples = synthesize_dataset(5, 3, 8);
        save_dataset(&path, &samples).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.source_id, b.source_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.patch.shape(), b.patch.shape());
            assert_eq!(a.patch.data(), b.patch.data());
        }
    }

    #[test]
    fn checkpoint_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ensd");
        std::fs::write(&path, b"ENSB.....").unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(DataError::CorruptCache(_))
        ));
    }
}
