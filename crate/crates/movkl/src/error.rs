use std::path::PathBuf;

/// Errors raised by the file formats and the command layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] movkl_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config or usage, 3 data, 4 non-convergence,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Parse { .. } | CliError::Data(_) | CliError::Csv(_) => EXIT_DATA,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Io { .. } | CliError::Json(_) => EXIT_OTHER,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &movkl_core::Error) -> i32 {
    use movkl_core::Error as E;
    match e {
        E::NotConverged { .. } => EXIT_NOT_CONVERGED,
        E::FitAborted { source, .. } => core_exit_code(source),
        E::Domain(_) | E::Precondition(_) => EXIT_CONFIG,
        E::Data(_) | E::NonFinite { .. } | E::Dimension(_) | E::InvalidGrid(_) => EXIT_DATA,
        E::Numerical(_) | E::Capacity { .. } | E::Degenerate(_) => EXIT_OTHER,
    }
}
