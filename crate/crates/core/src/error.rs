use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// input/validation problems exit with 2, numeric failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("internal invariant violation: {0}")]
    Invariant(String),

    #[error("unknown experiment: {0}")]
    UnknownExperiment(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Exit code for the CLI: 2 for validation errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::InsufficientData(_)
            | Error::Shape(_)
            | Error::UnknownExperiment(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// Short machine-parsable kind string.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Fit(_) => "fit",
            Error::Estimation(_) => "estimation",
            Error::Convergence(_) => "convergence",
            Error::Degenerate(_) => "degenerate",
            Error::Invariant(_) => "invariant",
            Error::UnknownExperiment(_) => "unknown_experiment",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
