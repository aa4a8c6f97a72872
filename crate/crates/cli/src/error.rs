use std::fmt;

use speech_quality::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage or an invalid or inconsistent configuration.
    Config(String),
    /// Unreadable, missing or inconsistent input and output files.
    Data(String),
    /// Non-finite losses, gradients or other numerical breakdowns.
    Numerical(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_)
            | Error::InsufficientPadding(_)
            | Error::InvalidStft(_)
            | Error::InvalidFractions { .. } => CliError::Config(msg),
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => CliError::Numerical(msg),
            Error::MissingFile { .. }
            | Error::MalformedWav { .. }
            | Error::UnsupportedEncoding { .. }
            | Error::SampleRateMismatch { .. }
            | Error::InvalidWaveform(_)
            | Error::SignalTooShort { .. }
            | Error::SilentSignal(_)
            | Error::ScoreOutOfRange(_)
            | Error::Manifest { .. }
            | Error::Checkpoint(_)
            | Error::UnknownParameter(_)
            | Error::Shape { .. }
            | Error::TooFewItems { .. }
            | Error::LengthMismatch { .. }
            | Error::Io(_)
            | Error::Json(_) => CliError::Data(msg),
            _ => CliError::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        assert_eq!(
            CliError::from(Error::Config("x".into())).exit_code(),
            EXIT_CONFIG
        );
        assert_eq!(
            CliError::from(Error::InsufficientPadding(0)).exit_code(),
            EXIT_CONFIG
        );
        assert_eq!(
            CliError::from(Error::NonFiniteLoss {
                step: 3,
                detail: "nan".into()
            })
            .exit_code(),
            EXIT_NUMERICAL
        );
        assert_eq!(
            CliError::from(Error::SampleRateMismatch {
                expected: 16_000,
                actual: 8_000
            })
            .exit_code(),
            EXIT_DATA
        );
        assert_eq!(
            CliError::from(Error::MissingFile {
                path: "a.wav".into()
            })
            .exit_code(),
            EXIT_DATA
        );
    }
}
