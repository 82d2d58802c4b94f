//! Preprocessing, optimization and the cross-validation harness.

use std::path::PathBuf;

use thiserror::Error;

use crate::io::IoError;
use crate::resnet::{FreezePolicy, ModelError, Stage};
use crate::stats::StatsError;
use crate::tensor::TensorError;
use crate::xai::XaiError;

pub mod fit;
pub mod folds;
pub mod optim;
pub mod preprocess;

pub use fit::{
    build_model, evaluate_fold, predict_proba, prepare_volume, scan_heat_scores, train_fold, BatchRecord, DataSource,
    EpochRecord, InMemorySource, ManifestSource, Subject, TrainOutcome,
};
pub use folds::{make_folds, Fold, FoldPlan};
pub use optim::{adam_update, AdamState, EarlyStop, EarlyStopping, PlateauScheduler};
pub use preprocess::{random_rotation, rotate, sample_rotation_angles, zscore_normalize, Axis};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
    #[error("class {label} has {count} subjects, fewer than the {folds} folds")]
    TooFewSubjects { label: u8, count: usize, folds: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid fold plan: {0}")]
    InvalidPlan(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    #[error("subject {subject}: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Xai(#[from] XaiError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl TrainError {
    /// The innermost error, past subject annotations.
    pub fn root(&self) -> &TrainError {
        match self {
            TrainError::Subject { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Weight initialization source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Init {
    #[default]
    Scratch,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub depth: u32,
    pub base_width: usize,
    pub lr0: f64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    /// Minimum validation-loss decrease that counts as an improvement.
    pub min_improvement: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub val_fraction: f64,
    /// Set to 0 to disable rotation augmentation.
    pub rotation_max_deg: f64,
    pub seed: u64,
    pub freeze: FreezePolicy,
    pub init: Init,
    /// Resample every scan to these extents before normalization.
    pub resize: Option<[usize; 3]>,
    /// Layer whose Grad-CAM is scored during evaluation.
    pub cam_layer: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 18,
            base_width: 8,
            lr0: 1e-3,
            scheduler_factor: 0.1,
            scheduler_patience: 5,
            min_improvement: 1e-4,
            early_stop_patience: 10,
            max_epochs: 100,
            batch_size: 2,
            folds: 5,
            val_fraction: 0.2,
            rotation_max_deg: 15.0,
            seed: 0,
            freeze: FreezePolicy::None,
            init: Init::Scratch,
            resize: None,
            cam_layer: Stage::Stage4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return bad(format!("scheduler factor must be in (0, 1], got {}", self.scheduler_factor));
        }
        if !(self.min_improvement >= 0.0) {
            return bad(format!("min_improvement must be >= 0, got {}", self.min_improvement));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be positive".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return bad(format!("rotation_max_deg must be >= 0, got {}", self.rotation_max_deg));
        }
        if self.resize.is_some_and(|r| r.contains(&0)) {
            return bad("resize extents must be positive".into());
        }
        Ok(())
    }
}
