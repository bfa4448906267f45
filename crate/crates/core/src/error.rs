use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PaceError>;

#[derive(Debug, Error)]
pub enum PaceError {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Cholesky hit a non-positive pivot even after jitter.
    #[error("matrix is not positive definite (pivot {pivot}{})", concept_suffix(*.concept))]
    Singular { concept: Option<usize>, pivot: usize },

    /// A concept received no responsibility mass in the M-step.
    #[error("concept {0} has zero total responsibility")]
    DeadConcept(usize),

    #[error("attention weights of record `{record}` sum to zero")]
    DegenerateAttention { record: String },

    #[error("training labels contain a single class ({0}); faithfulness needs at least two")]
    DegenerateLabels(usize),

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {}: {reason}", file.display())]
    Format { file: PathBuf, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn concept_suffix(concept: Option<usize>) -> String {
    match concept {
        Some(k) => format!(", concept {k}"),
        None => String::new(),
    }
}

impl PaceError {
    pub(crate) fn format(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PaceError::Format {
            file: file.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PaceError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a concept index to a singularity error raised by a bare factorization.
    pub fn with_concept(self, k: usize) -> Self {
        match self {
            PaceError::Singular { pivot, .. } => PaceError::Singular {
                concept: Some(k),
                pivot,
            },
            other => other,
        }
    }
}
