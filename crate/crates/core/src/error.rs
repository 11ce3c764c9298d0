use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty slide")]
    EmptySlide,

    #[error("empty bag")]
    EmptyBag,

    #[error("degenerate histogram: all mass in bin {bin}")]
    DegenerateHistogram { bin: u8 },

    #[error("slide smaller than window: {width}x{height} < {window}")]
    SlideSmallerThanWindow {
        width: u32,
        height: u32,
        window: u32,
    },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step} (slide {slide})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        slide: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing label for slide {0}")]
    MissingSlideLabel(String),

    #[error("degenerate pseudo-dataset: {0}")]
    DegeneratePseudoDataset(String),

    #[error("training set has {found} items, need at least {required}")]
    TrainTooSmall { required: usize, found: usize },

    #[error("single-class training data")]
    SingleClass,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("kappa undefined: zero expected disagreement")]
    KappaUndefined,

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("manifest {path}, row {row}: {message}")]
    Manifest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier used by the command line for one-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptySlide => "empty_slide",
            Error::EmptyBag => "empty_bag",
            Error::DegenerateHistogram { .. } => "degenerate_histogram",
            Error::SlideSmallerThanWindow { .. } => "slide_smaller_than_window",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidLabel(_) => "invalid_label",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::MissingSlideLabel(_) => "missing_slide_label",
            Error::DegeneratePseudoDataset(_) => "degenerate_pseudo_dataset",
            Error::TrainTooSmall { .. } => "train_too_small",
            Error::SingleClass => "single_class",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::KappaUndefined => "kappa_undefined",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::Manifest { .. } => "manifest",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
