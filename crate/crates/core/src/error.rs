use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("region mask selects no pixels")]
    EmptyRegion,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("unsupported kernel size {0} (must be odd)")]
    UnsupportedKernel(usize),
    #[error("backward requires a scalar output, got {0} elements")]
    NotScalar(usize),
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("weights do not match the declared layout: {0}")]
    WeightsMismatch(String),
    #[error("malformed tensor archive: {0}")]
    Archive(String),
    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),
    #[error("input {height}x{width} is too small (minimum {min})")]
    InputTooSmall { height: usize, width: usize, min: usize },
    #[error("region crop {height}x{width} is smaller than 8x8")]
    RegionTooSmall { height: usize, width: usize },
    #[error("no training or evaluation data")]
    NoData,
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("crop {crop_h}x{crop_w} larger than image {height}x{width}")]
    CropTooLarge { crop_h: usize, crop_w: usize, height: usize, width: usize },
    #[error("crop or image not aligned to {align} pixels: {detail}")]
    AlignmentError { align: usize, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: {source}")]
    Manifest {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
