use std::fmt;

use forge_core::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::MissingTarget(_)
            | Error::BadSchedule(_)
            | Error::BadTimestep { .. }
            | Error::ShapeTooLarge => Self::Config(msg),
            Error::NonFiniteLoss { .. } | Error::EmptyBand { .. } => Self::Numerical(msg),
            Error::EmptyMask
            | Error::FullMask
            | Error::NoSurface
            | Error::EmptyDataset
            | Error::DimMismatch(_)
            | Error::TooFewItems { .. }
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Json(_) => Self::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
