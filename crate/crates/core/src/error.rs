use alloc::string::String;

/// Error categories shared by every module.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration or argument value violates a documented constraint.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data is malformed (non-finite values, missing items).
    #[error("data error: {0}")]
    Data(String),
    /// Two operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A numerical routine produced a non-finite or undefined result.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(alloc::format!($($arg)*)) };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, numeric_err, shape_err};
