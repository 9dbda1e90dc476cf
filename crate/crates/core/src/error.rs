use alloc::string::String;
use core::fmt;

/// Errors produced by the stereo pipeline and its components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Mismatched or unusable raster/tensor dimensions.
    Shape(String),
    /// A value outside its mathematical domain (e.g. non-positive disparity
    /// in the depth relation).
    Domain(String),
    /// An index or window that leaves the owning raster.
    Range(String),
    /// A parameter set violating its documented invariants.
    InvalidParam(String),
    /// A disparity that cannot be encoded in the 16-bit file format.
    Encoding(String),
    /// Training aborted (non-finite loss, empty dataset).
    Training(String),
    /// Interpolation requires at least one pixel labeled correct.
    NoCorrectPixels,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Range(msg) => write!(f, "range error: {msg}"),
            Error::InvalidParam(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Encoding(msg) => write!(f, "encoding error: {msg}"),
            Error::Training(msg) => write!(f, "training error: {msg}"),
            Error::NoCorrectPixels => {
                write!(f, "interpolation impossible: no pixels labeled correct")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
