use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::NUM_CLASSES;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {value} at ({row}, {col}) is outside 0..{NUM_CLASSES}")]
    InvalidLabel { row: usize, col: usize, value: u8 },

    #[error("non-finite value at index {index:?}")]
    NonFinite { index: Vec<usize> },

    #[error("shape mismatch ({what}): {left:?} vs {right:?}")]
    ShapeMismatch {
        what: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid dimension {dim}: {reason}")]
    InvalidDimension { dim: String, reason: String },

    #[error("64x64 window at ({row}, {col}) does not fit in a {rows}x{cols} slice")]
    PatchOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("unknown subject id {0:?}")]
    UnknownSubject(String),

    #[error("subject ids assigned to both train and test: {0:?}")]
    OverlappingSplit(Vec<String>),

    #[error("infeasible phantom: {0}")]
    Phantom(String),

    #[error("subject {0:?} has no label volume")]
    MissingLabels(String),

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("negative value {value} at index {index:?}")]
    NegativeValue { index: Vec<usize>, value: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },

    #[error("run {run}: {source}")]
    Run { run: usize, source: Box<Error> },

    #[error("slice {slice}: {source}")]
    Slice { slice: usize, source: Box<Error> },

    #[error("no eligible training slices: {0}")]
    NoEligibleSlices(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no prediction for subject {0:?}")]
    MissingPrediction(String),

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    /// Stable snake-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidLabel { .. } => "invalid_label",
            Error::NonFinite { .. } => "non_finite",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidDimension { .. } => "invalid_dimension",
            Error::PatchOutOfBounds { .. } => "patch_out_of_bounds",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::UnknownSubject(_) => "unknown_subject",
            Error::OverlappingSplit(_) => "overlapping_split",
            Error::Phantom(_) => "phantom",
            Error::MissingLabels(_) => "missing_labels",
            Error::Retrieval(_) => "retrieval",
            Error::NegativeValue { .. } => "negative_value",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Run { .. } => "run",
            Error::Slice { .. } => "slice",
            Error::NoEligibleSlices(_) => "no_eligible_slices",
            Error::Empty(_) => "empty",
            Error::MissingPrediction(_) => "missing_prediction",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(what: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
