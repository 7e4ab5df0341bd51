use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension error on line {line}: `{field}` has length {found}, expected {expected}")]
    RecordDimension {
        line: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index error: {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("alignment error in video {video_id}: {detail}")]
    Alignment { video_id: String, detail: String },

    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("integrity error on line {line}: {detail}")]
    Integrity { line: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
