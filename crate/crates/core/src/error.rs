//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("constraint violation in relation {relation}, row {row}: {message}")]
    Constraint {
        relation: String,
        row: usize,
        message: String,
    },

    #[error("unknown relation {0}")]
    UnknownRelation(String),

    #[error("unknown attribute {attribute} in relation {relation}")]
    UnknownAttribute { relation: String, attribute: String },

    #[error("fact {0} not found")]
    FactNotFound(u64),

    #[error("fact belongs to relation {found}, expected {expected}")]
    RelationMismatch { expected: String, found: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel operand is null")]
    NullOperand,

    #[error("kernel operand is not numeric: {0}")]
    NonNumeric(String),

    #[error("kernel variance must be positive, got {0}")]
    NonpositiveVariance(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no embedding stored for fact {0}")]
    MissingEmbedding(u64),

    #[error("relation {0} has no facts")]
    EmptyRelation(String),

    #[error("no scheme/attribute pairs available for relation {0}")]
    NoPairs(String),

    #[error("no usable constraints when extending fact {0}")]
    NoUsableConstraints(u64),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("too few samples: {samples} samples for {folds} folds")]
    TooFewSamples { samples: usize, folds: usize },

    #[error("model does not match the database: {0}")]
    ModelMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Error {
        Error::Parse {
            location: "csv".into(),
            message: e.to_string(),
        }
    }
}

impl Error {
    /// Process exit code for the CLI: 1 i/o and parsing, 2 integrity,
    /// 3 numeric trouble, 4 bad configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Parse { .. } => 1,
            Error::Constraint { .. }
            | Error::UnknownRelation(_)
            | Error::UnknownAttribute { .. }
            | Error::FactNotFound(_)
            | Error::RelationMismatch { .. }
            | Error::ModelMismatch(_) => 2,
            Error::DimensionMismatch(_)
            | Error::NullOperand
            | Error::NonNumeric(_)
            | Error::NonpositiveVariance(_)
            | Error::NonFinite(_)
            | Error::MissingEmbedding(_)
            | Error::NoUsableConstraints(_) => 3,
            Error::EmptyRelation(_)
            | Error::NoPairs(_)
            | Error::SingleClass
            | Error::TooFewSamples { .. }
            | Error::InvalidConfig(_) => 4,
        }
    }
}
