use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left_rows}x{left_cols} and {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("basis seed is rank deficient (|r_jj| = {pivot:e} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("rotation requires even embedding dimension, got d = {0}")]
    OddDimension(usize),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("undefined cosine at zero mean")]
    UndefinedCosine,

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("file format error: {0}")]
    Format(#[from] FormatError),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote oracle reported: {0}")]
    Remote(String),

    #[error("transport error ({endpoint}): {message}")]
    Transport { endpoint: String, message: String },

    #[error("oracle timed out after {0} s")]
    Timeout(u64),

    #[error("handshake mismatch: expected d = {expected}, remote serves d = {actual}")]
    Handshake { expected: usize, actual: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("fixture {id}: {message}")]
    Fixture { id: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::OddDimension(_) => "odd_dimension",
            Error::Constraint(_) => "constraint",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::UndefinedCosine => "undefined_cosine",
            Error::Oracle(_) => "oracle",
            Error::Format(_) => "format",
            Error::Protocol(_) => "protocol",
            Error::Remote(_) => "remote",
            Error::Transport { .. } => "transport",
            Error::Timeout(_) => "timeout",
            Error::Handshake { .. } => "handshake",
            Error::Config(_) => "config",
            Error::Fixture { .. } => "fixture",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

/// Failures while decoding an embedding file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown role tag {0}")]
    UnknownRole(u8),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("matrix has zero rows or columns ({rows}x{cols})")]
    Empty { rows: u32, cols: u32 },
    #[error("expected {expected} record(s), found {found}")]
    RecordCount { expected: usize, found: usize },
    #[error("record role {found:?} where {expected:?} was expected")]
    RoleMismatch { expected: &'static str, found: &'static str },
}
