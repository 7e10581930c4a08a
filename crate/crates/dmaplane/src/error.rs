use thiserror::Error;

/// Error surface shared by every subsystem.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("busy: {0}")]
    Busy(String),
    #[error("stale handle: {0}")]
    StaleHandle(String),
    #[error("would block")]
    WouldBlock,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("local protection fault: {0}")]
    LocalProtection(String),
    #[error("child resource still alive: {0}")]
    ChildAlive(String),
    #[error("stale view")]
    StaleView,
    #[error("accounting corruption: {0}")]
    AccountingCorruption(String),
    #[error("aborted: {0}")]
    Aborted(String),
    #[error("chunk failed (layer {layer}, chunk {chunk}): {reason}")]
    ChunkFailed { layer: u16, chunk: u16, reason: String },
    #[error("flow-control breach: {0}")]
    FlowBreach(String),
    #[error("missing chunks: {0:?}")]
    MissingChunks(Vec<(u16, u16)>),
    #[error("duplicate chunk (layer {0}, chunk {1})")]
    DuplicateChunk(u16, u16),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
