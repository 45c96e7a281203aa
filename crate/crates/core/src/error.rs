use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// The Sherman-Morrison denominator `1 - kappa * |h|^2` is too close to zero.
    #[error("singular factored update: 1 - kappa*|h|^2 = {denominator:e}")]
    SingularUpdate { denominator: f64 },

    /// Arithmetic broke down, e.g. a diverging learning rate.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("stale cache: {0}")]
    StaleCache(&'static str),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure category, used by front-ends to choose exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension(_) | Error::Parameter(_) | Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => ErrorClass::Data,
            Error::SingularUpdate { .. } | Error::Numerical(_) | Error::StaleCache(_) => ErrorClass::Numerical,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
