use std::fmt;

/// CLI failure with its process exit code: 2 for config/schema problems,
/// 3 for data problems, 4 for numerical divergence.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { code: 3, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError { code: 4, message: msg.into() }
    }
}

impl From<svgp::Error> for CliError {
    fn from(e: svgp::Error) -> Self {
        use svgp::Error::*;
        let code = match &e {
            Config(_) => 2,
            Shape(_) | Arity(_) | MissingLatentRow(_) | UnsupportedMean(_) => 3,
            Divergence(_) | Factorization { .. } | NonFinite(_) => 4,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(format!("io error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
