use std::path::PathBuf;

use thiserror::Error;

use crate::linalg::SolveError;
use crate::mesh::MeshError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid material: {0}")]
    Material(String),
    #[error("unknown boundary tag {0}")]
    UnknownTag(u32),
    #[error("port '{port}': mode count {count} exceeds its {dofs} DoFs")]
    ModeCount { port: String, count: usize, dofs: usize },
    #[error("incompatible port between {a} and {b}: {reason}")]
    IncompatiblePort { a: String, b: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient constraints (rigid-body modes): {0}")]
    InsufficientConstraints(String),
    #[error("missing trained data: {0}")]
    MissingData(String),
    #[error("reduced system is not positive definite: {0}")]
    ReducedNotSpd(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Solve(_) | Error::InsufficientConstraints(_) | Error::ReducedNotSpd(_) => ErrorCategory::Numerical,
            Error::Mesh(m) if m.is_numerical() => ErrorCategory::Numerical,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Stage { source, .. } => source.category(),
            _ => ErrorCategory::Validation,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

/// Attaches a stage label to any error on the way out.
pub trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(stage))
    }
}
