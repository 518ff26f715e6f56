use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtgError {
    #[error("parse error at offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Autodiff(#[from] ctg_autodiff::AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CtgError>;

impl CtgError {
    pub fn record(id: impl Into<String>, msg: impl Into<String>) -> Self {
        CtgError::Record {
            id: id.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CtgError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
