use std::fmt;

/// Error carrying the process exit code: 2 for usage and config problems, 1 otherwise.
#[derive(Debug)]
pub struct CliError {
    code: i32,
    error: anyhow::Error,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            error: anyhow::anyhow!(msg.into()),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Invalid parameters found by the library count as config errors.
impl From<sparsevi::Error> for CliError {
    fn from(e: sparsevi::Error) -> Self {
        match e {
            sparsevi::Error::InvalidInput(_) => Self::config(e.to_string()),
            other => Self::runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime(e)
    }
}
