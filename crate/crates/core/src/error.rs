use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("function evaluation produced a non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("response is empty; nothing to classify")]
    EmptyResponse,

    #[error("every chunk slot is masked; nothing to classify")]
    AllChunksMasked,

    #[error("no negatable sentence found")]
    NoCandidate,

    #[error("injection rejected: {0}")]
    InjectionRejected(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("http status {status}: {body}")]
    HttpStatus { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unparseable verdict: {raw:?}")]
    UnparseableVerdict { raw: String },

    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (examples {ids:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        ids: Vec<String>,
    },

    #[error("roc auc needs both classes present")]
    SingleClass,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
