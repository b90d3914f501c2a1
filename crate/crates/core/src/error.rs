use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PallorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PallorError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("region out of bounds: {0}")]
    RoiOutOfBounds(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("{channel} channel mean {mean} is below the floor {floor}; the white square is not visible")]
    UnderFloorCard {
        channel: &'static str,
        mean: f64,
        floor: f64,
    },
    #[error("brightness {value} below floor {floor}")]
    UnderFloorBrightness { value: f64, floor: f64 },
    #[error("segmentation failed: mask has {area} px, need at least {min_area}")]
    SegmentationFailed { area: usize, min_area: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("network shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),
}

impl PallorError {
    /// Stable machine-readable identifier, used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            PallorError::MissingFile(_) => "missing_file",
            PallorError::UnsupportedFormat(_) => "unsupported_format",
            PallorError::CorruptHeader(_) => "corrupt_header",
            PallorError::Io { .. } => "io_error",
            PallorError::InvalidDimensions(_) => "invalid_dimensions",
            PallorError::RoiOutOfBounds(_) => "roi_out_of_bounds",
            PallorError::EmptyRegion => "empty_region",
            PallorError::UnderFloorCard { .. } => "card_under_floor",
            PallorError::UnderFloorBrightness { .. } => "brightness_under_floor",
            PallorError::SegmentationFailed { .. } => "segmentation_failed",
            PallorError::DimensionMismatch(_) => "dimension_mismatch",
            PallorError::Shape(_) => "shape_mismatch",
            PallorError::InvalidConfig(_) => "invalid_config",
            PallorError::Weights(_) => "weights_error",
            PallorError::Dataset(_) => "dataset_error",
            PallorError::OutOfRange(_) => "out_of_range",
            PallorError::ModelNotLoaded(_) => "model_not_loaded",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PallorError::Io {
            path: path.into(),
            source,
        }
    }
}
