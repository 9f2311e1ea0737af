use thiserror::Error;

pub type Result<T, E = FitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row}); raise the identity regularizer")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("node {node} ({op}) has no adjoint")]
    UnsupportedNode { node: usize, op: &'static str },

    #[error("class {class} has no examples")]
    EmptyClass { class: usize },

    #[error("class {class} has {count} example(s); at least 2 are required to split")]
    TooFewShots { class: usize, count: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("evaluation class {class} is not owned by any client")]
    UncoveredClass { class: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<FitError>,
    },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<FitError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FitError {
    pub fn at_iteration(self, iteration: usize) -> Self {
        FitError::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub fn for_client(self, client: usize) -> Self {
        FitError::Client {
            client,
            source: Box::new(self),
        }
    }
}
