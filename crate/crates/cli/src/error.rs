use std::fmt;

use corrseg_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const SHAPE: u8 = 5;
    pub const EMPTY: u8 = 6;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(exit::CONFIG, message)
    }

    pub fn empty(message: impl Into<String>) -> Self {
        Self::new(exit::EMPTY, message)
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Self::new(exit::SHAPE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter(_) | Error::Manifest { .. } => exit::CONFIG,
            Error::Io { .. }
            | Error::Format(_)
            | Error::UnsupportedVersion(_)
            | Error::Corrupt(_)
            | Error::Invariant(_)
            | Error::Decode { .. }
            | Error::Data(_) => exit::IO,
            Error::Numeric(_) | Error::Degenerate(_) => exit::NUMERIC,
            Error::Shape(_) => exit::SHAPE,
            Error::UndefinedMetrics => exit::EMPTY,
        };
        Self { code, message: e.to_string() }
    }
}
