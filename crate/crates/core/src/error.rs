use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {dimension}: expected {expected}, got {actual}")]
    Shape {
        dimension: String,
        expected: String,
        actual: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cannot load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },
    #[error("modalities not aligned: {0}")]
    Alignment(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("evaluation error in sequence `{sequence}`: {reason}")]
    Evaluation { sequence: String, reason: String },
    #[error("degenerate point configuration: {0}")]
    RankDeficient(String),
    #[error("singular mapping: {0}")]
    Singular(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(dimension: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            dimension: dimension.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Stable machine-readable code, used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Argument(_) => "argument",
            Error::Load { .. } => "load",
            Error::Alignment(_) => "alignment",
            Error::Parse { .. } => "parse",
            Error::Evaluation { .. } => "evaluation",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Singular(_) => "singular",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}
