//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EattsError {
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },

    #[error("numeric fault in '{name}': {detail}")]
    Numeric { name: String, detail: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<EattsError>,
    },
}

pub type Result<T> = std::result::Result<T, EattsError>;

impl EattsError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EattsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        EattsError::Dimension {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        EattsError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
