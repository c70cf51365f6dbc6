use std::fmt;

use serde_json::json;

/// Failure of a CLI command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or a missing input path. Exit 2.
    Usage(String),
    /// Invalid configuration. Exit 3.
    Config(String),
    Core(diffseg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::Core(diffseg::Error::Config(_)) => 3,
            CliError::Core(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Core(e) => match e {
                diffseg::Error::Config(_) => "config",
                diffseg::Error::Input(_) => "input",
                diffseg::Error::Training(_) => "training",
                diffseg::Error::Model(_) => "model",
                diffseg::Error::Data(_) => "data",
                diffseg::Error::Io { .. } | diffseg::Error::Image { .. } => "io",
                diffseg::Error::Json(_) => "json",
            },
        }
    }

    /// One line of JSON for stderr.
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind(), "code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Config(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<diffseg::Error> for CliError {
    fn from(e: diffseg::Error) -> Self {
        CliError::Core(e)
    }
}
