use lfm_autodiff::AutodiffError;
use lfm_core::data::DataError;
use lfm_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad invocation or missing input file.
    #[error("{0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("op set mismatch: genotype was searched over `{found}` but the config uses `{expected}` (use --force to override)")]
    OpSetMismatch { expected: String, found: String },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code: 2 for usage and configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_)
            | HarnessError::Config(_)
            | HarnessError::Genotype(_)
            | HarnessError::OpSetMismatch { .. } => 2,
            HarnessError::Core(CoreError::Config(_) | CoreError::UnknownOp(_)) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
