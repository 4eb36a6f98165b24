//! Command-line failure classes and their process exit codes.

use thiserror::Error;

/// Every way a command can fail, keyed to a documented exit code:
///
/// | code | class      | examples                                         |
/// |------|------------|--------------------------------------------------|
/// | 1    | i/o        | output directory not writable                    |
/// | 2    | parse      | malformed config, missing file, bad CSV input    |
/// | 3    | validation | asymmetric K, wrong species count, bad sections  |
/// | 4    | solver     | Newton failure in a forward run                  |
/// | 5    | optimizer  | line-search stall (best iterate still written)   |
/// | 6    | fit        | degenerate affine fit on a stationary run        |
#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("optimizer failure: {0}")]
    Optimizer(String),
    #[error("fit failure: {0}")]
    Fit(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Parse(_) => 2,
            Self::Validation(_) => 3,
            Self::Solver(_) => 4,
            Self::Optimizer(_) => 5,
            Self::Fit(_) => 6,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}
