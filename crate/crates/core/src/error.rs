use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid group parameters: {0}")]
    InvalidParams(String),

    #[error("group generation gave up after {attempts} attempts")]
    GenerationTimeout { attempts: usize },

    #[error("unknown parameter set `{0}`")]
    UnknownParamSet(String),

    #[error("element is not in the prime-order subgroup")]
    NotInSubgroup,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("discrete log not in range [-{bound}, {bound}]")]
    NotInRange { bound: u64 },

    #[error("full dlog table needs {entries} entries, cap is {cap}; use bsgs mode")]
    TableTooLarge { entries: u128, cap: u64 },

    #[error("value {value} exceeds encoding bound {bound}")]
    BoundExceeded { value: f64, bound: f64 },

    #[error("encoded entry {value} exceeds limit {limit}")]
    EncodedBoundExceeded { value: i64, limit: i64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape check failed: {0}")]
    ShapeMismatch(String),

    #[error("unknown source id {0}")]
    UnknownSource(usize),

    #[error("source id {0} already registered")]
    DuplicateSource(usize),

    #[error("capacity of {n} sources exceeded")]
    CapacityExceeded { n: usize },

    #[error("missing ciphertext for source {0}")]
    MissingSource(usize),

    #[error("key request rejected: {0}")]
    FilterRejected(String),

    #[error("inconsistent meta information: {0}")]
    InconsistentMeta(String),

    #[error("entity resolution found no common entities")]
    EmptyIntersection,

    #[error("privacy guard refused: n_epoch / n_shuffle = {epochs}/{shuffles} is not below n_feature = {features}")]
    PrivacyGuardRefused {
        epochs: usize,
        shuffles: usize,
        features: usize,
    },

    #[error("training aborted at batch {batch}: {source}")]
    BatchFailed {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("wire protocol: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
