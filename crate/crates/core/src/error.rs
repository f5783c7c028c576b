use thiserror::Error;

/// Failures while decoding bytes received from the other party.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("buffer truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported wire version {0}")]
    VersionMismatch(u8),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("payload length mismatch: header says {declared}, found {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("protocol state error: {0}")]
    ProtocolState(String),
    #[error("handshake refused: {0}")]
    Handshake(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error("transport closed by peer")]
    Disconnected,
}

pub type Result<T> = std::result::Result<T, Error>;
