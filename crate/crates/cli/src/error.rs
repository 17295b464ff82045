use std::fmt;

use letlab_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_MISSING_PREREQUISITE: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self::new(EXIT_CHECK_FAILED, message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        Self::new(EXIT_MISSING_PREREQUISITE, message)
    }

    /// A core error that stems from an input the user had to provide first.
    pub fn prerequisite(e: Error) -> Self {
        Self::missing(e.to_string())
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
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
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::NonFinite { .. } => EXIT_DIVERGENCE,
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_CHECK_FAILED,
        };
        Self::new(code, e.to_string())
    }
}
