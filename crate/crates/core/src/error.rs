use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An index or value outside the domain of a task (e.g. a response that is
    /// not in the prompt's candidate set).
    #[error("domain error: {0}")]
    Domain(String),
    /// A call that violates an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),
    /// An invalid experiment or generator configuration, detected up front.
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $kind:ident, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$kind(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
