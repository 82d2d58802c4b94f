//! File formats: NIfTI-1 volumes, HSCK checkpoints and dataset manifests.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::resnet::ModelError;
use crate::volume::VolumeError;

pub mod checkpoint;
pub mod manifest;
pub mod nifti;

pub use checkpoint::{
    apply_checkpoint, decode_checkpoint, encode_checkpoint, infer_spec, load_checkpoint, read_checkpoint, save_checkpoint,
    Checkpoint, CheckpointEntry,
};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRow};
pub use nifti::{decode_nifti, encode_nifti, read_nifti, write_nifti, Endian};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: {0}")]
    BadMagic(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality: {0}")]
    UnsupportedDimensionality(String),
    #[error("truncated file: needed {needed} bytes, got {got}")]
    TruncatedFile { needed: usize, got: usize },
    #[error("checkpoint format version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("checkpoint has no tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: checkpoint extents {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("duplicate subject id {0:?}")]
    DuplicateSubject(String),
    #[error("line {line}: label must be 0 or 1, got {value:?}")]
    BadLabel { line: usize, value: String },
    #[error("manifest is missing column {0:?}")]
    MissingColumn(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
