use std::fmt;

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            message: message.into(),
        }
    }

    /// The single stderr line: `dpgen: error code=<n> kind=<kind> message=<json string>`.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.message).unwrap_or_else(|_| "\"?\"".into());
        format!(
            "dpgen: error code={} kind={} message={msg}",
            self.code, self.kind
        )
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<dpgen::Error> for CliError {
    fn from(e: dpgen::Error) -> Self {
        let message = e.to_string();
        if e.is_numeric() {
            Self {
                code: EXIT_NUMERIC,
                kind: "numeric",
                message,
            }
        } else if matches!(e, dpgen::Error::InvalidArgument(_)) {
            Self::usage(message)
        } else {
            Self::io(message)
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
