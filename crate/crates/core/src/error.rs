use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the numerical core can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is outside its valid range.
    Config(String),
    /// A precondition on the inputs of an operation does not hold.
    InvalidInput(String),
    /// A feature vector had (near) zero norm before normalization.
    DegenerateFeature { norm: f64 },
    /// A class prototype could not be normalized (its mean feature vanished).
    DegeneratePrototype { class: usize },
    /// A class had no labeled example to initialize its prototype from.
    EmptyClass { class: usize },
    /// A label index fell outside `0..n_classes`.
    LabelOutOfRange { label: usize, n_classes: usize },
    /// A loss term, gradient, feature or parameter became NaN or infinite during training.
    NonFinite { term: &'static str, iteration: usize, value: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::DegenerateFeature { norm } => {
                write!(f, "degenerate feature: norm {norm:e} is below 1e-12")
            }
            Error::DegeneratePrototype { class } => {
                write!(f, "degenerate prototype for class {class}: mean feature has zero norm")
            }
            Error::EmptyClass { class } => write!(f, "class {class} has no labeled examples"),
            Error::LabelOutOfRange { label, n_classes } => {
                write!(f, "label {label} out of range for {n_classes} classes")
            }
            Error::NonFinite { term, iteration, value } => {
                write!(f, "`{term}` became {value} at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
