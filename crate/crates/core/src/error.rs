use thiserror::Error;

/// Errors produced anywhere in the counterfactual pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("table is empty")]
    EmptyTable,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("record {row} has {found} fields, expected {expected}")]
    FieldCount {
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column `{column}`: unknown value `{value}`")]
    UnknownValue { column: String, value: String },

    #[error("column {column}: id {id} out of range for cardinality {cardinality}")]
    IdOutOfRange {
        column: usize,
        id: usize,
        cardinality: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("requested gradient for a tensor that does not feed the loss")]
    NotInGraph,

    #[error("schema mismatch: expected digest {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
