//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any layer of the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (bad argument, bad state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: expected {expected}, got {got} in {context}")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: String,
    },

    /// A vector with (near-)zero norm reached an operation that needs a direction.
    #[error("degenerate vector: norm {norm:.3e} below threshold in {context}")]
    DegenerateVector { norm: f64, context: String },

    /// A non-finite value escaped a numeric kernel.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// A recorded tape primitive has no tangent rule for second-order sweeps.
    #[error("unsupported primitive for tangent propagation: {0}")]
    UnsupportedPrimitive(&'static str),

    /// A report used a token outside the encoder vocabulary.
    #[error("ingestion error: token {token:?} not in vocabulary (report {report_id})")]
    UnknownToken { token: String, report_id: String },

    /// Encoder training finished below the required retrieval accuracy.
    #[error("training diverged: held-out matched-label accuracy {accuracy:.4} < {required:.2}")]
    TrainingDiverged { accuracy: f64, required: f64 },

    /// A persisted artifact could not be decoded.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// A configuration document is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A campaign stage failed; partial outputs have been removed.
    #[error("campaign stage {stage:?} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code mandated for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
