use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("blocking factor {factor} does not divide extent {extent} ({what})")]
    Blocking {
        what: &'static str,
        extent: usize,
        factor: usize,
    },

    #[error("lookup {position} has index {index}, table has {rows} rows")]
    IndexOutOfRange { position: usize, index: usize, rows: usize },

    #[error("invalid lookup batch: {0}")]
    InvalidBatch(String),

    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),

    #[error("communication failure: {0}")]
    Comm(String),

    #[error("handle {op} was issued by context {owner}, not {caller}")]
    ForeignHandle { op: u64, owner: u64, caller: u64 },

    #[error("parameter {0} registered more than once")]
    DuplicateParam(u32),

    #[error("parameter {0} is not registered with the optimizer")]
    UnknownParam(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible run: {0}")]
    Infeasible(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
