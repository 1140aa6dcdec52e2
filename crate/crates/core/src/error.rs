use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("invalid language spec: {0}")]
    Spec(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("prefix length {len} reaches model max_len {max}")]
    Length { len: usize, max: usize },

    #[error("pool exhausted: requested {requested} from pool of {available}")]
    PoolExhausted { requested: usize, available: usize },

    #[error("setup error: {0}")]
    Setup(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("runs not comparable: {0}")]
    Comparability(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Corruption(_) => 4,
            _ => 1,
        }
    }
}
