use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid mixture ({m_high}, {m_low}): at least one member is required")]
    EmptyMixture { m_high: u32, m_low: u32 },

    #[error("invalid forecast: {0}")]
    InvalidForecast(String),

    #[error("empty training window for target date {target}")]
    EmptyWindow { target: NaiveDate },

    #[error("insufficient data: need {needed}, got {got} ({context})")]
    InsufficientData {
        needed: usize,
        got: usize,
        context: String,
    },

    #[error("coefficient count {coefficients} does not match group count {groups}")]
    Arity { coefficients: usize, groups: usize },

    #[error("quadrature failed to reach tolerance {tolerance:e} (estimated error {estimate:e})")]
    QuadratureFailure { tolerance: f64, estimate: f64 },

    #[error("invalid cluster count k={k} for {n} locations")]
    InvalidClusterCount { k: usize, n: usize },

    #[error("unknown location {0}")]
    UnknownLocation(String),

    #[error("histogram has no counts")]
    EmptyHistogram,

    #[error("reference score is zero")]
    ZeroReference,

    #[error("series too short: need {needed}, got {got}")]
    InsufficientSeries { needed: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failure classes reported by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::EmptyMixture { .. } | Error::InvalidClusterCount { .. } => ErrorClass::Config,
            Error::Data(_)
            | Error::InvalidForecast(_)
            | Error::EmptyWindow { .. }
            | Error::InsufficientData { .. }
            | Error::InsufficientSeries { .. }
            | Error::UnknownLocation(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::Domain(_)
            | Error::Arity { .. }
            | Error::QuadratureFailure { .. }
            | Error::EmptyHistogram
            | Error::ZeroReference
            | Error::Json(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn insufficient(needed: usize, got: usize, context: impl Into<String>) -> Self {
        Error::InsufficientData {
            needed,
            got,
            context: context.into(),
        }
    }
}
