use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the geometric, diffusion and evaluation operators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no voxels set")]
    EmptyMask,
    #[error("mask has every voxel set")]
    FullMask,
    #[error("no valid voxels in the narrow band |s| <= {band}")]
    EmptyBand { band: f64 },
    #[error("shape does not fit the grid with a 2-voxel margin")]
    ShapeTooLarge,
    #[error("field has no zero crossing")]
    NoSurface,
    #[error("timestep {t} outside [{min}, {max}]")]
    BadTimestep { t: usize, min: usize, max: usize },
    #[error("invalid noise schedule: {0}")]
    BadSchedule(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("guidance term `{0}` is weighted but its target is not set")]
    MissingTarget(&'static str),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("need at least {needed} items, got {got}")]
    TooFewItems { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
