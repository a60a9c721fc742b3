use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid embedding set: {0}")]
    InvalidSet(String),
    #[error("row {0} has zero norm")]
    DegenerateRow(usize),
    #[error("embeddings are not unit-normalized (row {row}, norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("class {0} is not present in the data")]
    UnknownClass(u32),
    #[error("split leaves one side empty")]
    EmptySplit,
    #[error("invalid k={k} for {n} samples")]
    InvalidK { k: usize, n: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("at least two classes are required")]
    NeedTwoClasses,
    #[error("class {0} has a single sample")]
    SingletonClass(u32),
    #[error("singular value spectrum is degenerate")]
    DegenerateSpectrum,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("cannot swap: one side holds a single class")]
    CannotSwap,
    #[error("fid axis is degenerate (duplicate values)")]
    DegenerateAxis,
    #[error("anchor {0} has no negatives in the batch")]
    NoNegatives(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("non-finite gradient at index {0}")]
    NonFinite(usize),
    #[error("class {0} has too few samples for the requested support size")]
    InsufficientSupport(u32),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error envelope.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape_error",
            Error::InvalidSet(_) => "invalid_set",
            Error::DegenerateRow(_) => "degenerate_row",
            Error::NotNormalized { .. } => "not_normalized",
            Error::UnknownClass(_) => "unknown_class",
            Error::EmptySplit => "empty_split",
            Error::InvalidK { .. } => "invalid_k",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NeedTwoClasses => "need_two_classes",
            Error::SingletonClass(_) => "singleton_class",
            Error::DegenerateSpectrum => "degenerate_spectrum",
            Error::NotSymmetric(_) => "not_symmetric",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::CannotSwap => "cannot_swap",
            Error::DegenerateAxis => "degenerate_axis",
            Error::NoNegatives(_) => "no_negatives",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidState(_) => "invalid_state",
            Error::NonFinite(_) => "non_finite",
            Error::InsufficientSupport(_) => "insufficient_support",
        }
    }
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
