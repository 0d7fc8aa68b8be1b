use alloc::string::String;

/// Error type shared by every module of the core crate.
///
/// The variants map onto the error classes the CLI turns into exit codes:
/// `Validation`/`Config`/`Bounds`/`Shape`/`Contract` are input problems,
/// `Numeric` is a non-finite value during optimization.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("coordinate out of bounds: {0}")]
    Bounds(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("no error regions left: protocol complete")]
    ProtocolComplete,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
