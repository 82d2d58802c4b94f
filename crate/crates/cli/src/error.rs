//! Exit-code taxonomy.

use std::fmt;

use voxcam::io::IoError;
use voxcam::phantom::PhantomError;
use voxcam::resnet::ModelError;
use voxcam::stats::StatsError;
use voxcam::train::TrainError;
use voxcam::xai::XaiError;
use voxcam::{TensorError, VolumeError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    fn with_code(code: i32, e: &impl fmt::Display) -> Self {
        Self { code, message: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::DegenerateBatch { .. } => EXIT_DEGENERATE,
        _ => EXIT_DATA,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Tensor(t) => tensor_code(t),
        _ => EXIT_DATA,
    }
}

fn xai_code(e: &XaiError) -> i32 {
    match e {
        XaiError::DegenerateBackground => EXIT_DEGENERATE,
        XaiError::Model(m) => model_code(m),
        _ => EXIT_DATA,
    }
}

fn stats_code(e: &StatsError) -> i32 {
    match e {
        StatsError::DegenerateDifferences => EXIT_DEGENERATE,
        StatsError::Xai(x) => xai_code(x),
        _ => EXIT_DATA,
    }
}

fn io_code(e: &IoError) -> i32 {
    match e {
        IoError::Model(m) => model_code(m),
        _ => EXIT_DATA,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e.root() {
        TrainError::DegenerateVolume(_) => EXIT_DEGENERATE,
        TrainError::InvalidConfig(_) => EXIT_USAGE,
        TrainError::Io(e) => io_code(e),
        TrainError::Model(e) => model_code(e),
        TrainError::Xai(e) => xai_code(e),
        TrainError::Stats(e) => stats_code(e),
        _ => EXIT_DATA,
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::with_code(tensor_code(&e), &e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::with_code(model_code(&e), &e)
    }
}

impl From<XaiError> for CliError {
    fn from(e: XaiError) -> Self {
        Self::with_code(xai_code(&e), &e)
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        Self::with_code(stats_code(&e), &e)
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self::with_code(io_code(&e), &e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::with_code(train_code(&e), &e)
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        Self::with_code(EXIT_DATA, &e)
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::InvalidSpec(_) => Self::with_code(EXIT_USAGE, &e),
            PhantomError::Io(io) => io.into(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::with_code(EXIT_DATA, &e)
    }
}
