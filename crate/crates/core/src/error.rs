use alloc::string::String;
use core::fmt;

/// Failures raised by the signal, feature, and learning routines.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input had the wrong shape or length for the operation.
    Shape(String),
    /// Filter design parameters were out of range.
    Design(String),
    /// A signal was too short for the requested operation.
    TooShort { needed: usize, found: usize },
    /// A scalar parameter violated its precondition.
    Parameter(String),
    /// A configuration combination is unsupported.
    Config(String),
    /// Input statistics made the operation ill-defined (zero variance, all-equal samples).
    Degenerate(String),
    /// An operation received no data.
    Empty(String),
    /// A subject id was not present in the dataset.
    UnknownSubject(String),
    /// A class target was outside `0..classes`.
    InvalidTarget { target: usize, classes: usize },
    /// A structural precondition failed (for example CAR on a single channel).
    Precondition(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Design(m) => write!(f, "filter design error: {m}"),
            Error::TooShort { needed, found } => {
                write!(f, "signal too short: need more than {needed} samples, got {found}")
            }
            Error::Parameter(m) => write!(f, "invalid parameter: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Degenerate(m) => write!(f, "degenerate input: {m}"),
            Error::Empty(m) => write!(f, "empty input: {m}"),
            Error::UnknownSubject(s) => write!(f, "unknown subject `{s}`"),
            Error::InvalidTarget { target, classes } => {
                write!(f, "target {target} out of range for {classes} classes")
            }
            Error::Precondition(m) => write!(f, "precondition violated: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
