use std::path::PathBuf;

use thiserror::Error;

use crate::phase::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("malformed volume: {0}")]
    MalformedVolume(String),

    #[error("malformed detections: {0}")]
    MalformedDetections(String),

    #[error("invalid spacing {0:?}: every component must be finite and > 0")]
    InvalidSpacing([f64; 3]),

    #[error("invalid box {0:?}: every extent must be finite and > 0")]
    InvalidBox(Vec<f64>),

    #[error("no normalization statistics for phase {0}")]
    MissingPhaseStats(Phase),

    #[error("phase {0} is not present in the study")]
    MissingPhase(Phase),

    #[error("invalid phase selector {0:?}")]
    InvalidPhaseSelector(String),

    #[error("crop {crop:?} exceeds volume dims {dims:?}")]
    CropTooLarge { crop: [usize; 3], dims: [usize; 3] },

    #[error("invalid window: depth {window}, overlap {overlap}")]
    InvalidWindow { window: usize, overlap: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cohort is empty or has no lesions: {0}")]
    EmptyCohort(String),

    #[error("cohort too small for variance estimation: {n_target} targets, {n_control} controls")]
    DegenerateCohort { n_target: usize, n_control: usize },

    #[error("paired study sets do not match: {0}")]
    MismatchedStudies(String),

    #[error("invalid p-value {0}")]
    InvalidProbability(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no usable phase for TACE classification")]
    NoUsablePhase,

    #[error("could not place lesion after {0} attempts")]
    PlacementFailed(usize),
}

impl Error {
    /// Stable short code for each failure class, used in CLI error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingFile(_) => "missing_file",
            Error::DimsMismatch(_) => "dims_mismatch",
            Error::MalformedManifest(_) => "malformed_manifest",
            Error::MalformedVolume(_) => "malformed_volume",
            Error::MalformedDetections(_) => "malformed_detections",
            Error::InvalidSpacing(_) => "invalid_spacing",
            Error::InvalidBox(_) => "invalid_box",
            Error::MissingPhaseStats(_) => "missing_phase_stats",
            Error::MissingPhase(_) => "missing_phase",
            Error::InvalidPhaseSelector(_) => "invalid_phase_selector",
            Error::CropTooLarge { .. } => "crop_too_large",
            Error::InvalidWindow { .. } => "invalid_window",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyCohort(_) => "empty_cohort",
            Error::DegenerateCohort { .. } => "degenerate_cohort",
            Error::MismatchedStudies(_) => "mismatched_studies",
            Error::InvalidProbability(_) => "invalid_probability",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NoUsablePhase => "no_usable_phase",
            Error::PlacementFailed(_) => "placement_failed",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
