use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout error: {0}")]
    Layout(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric failure: {msg} (parameter norm {param_norm:.6e})")]
    Numeric { msg: String, param_norm: f64 },

    #[error("capacity exceeded: {len} parameters (limit {limit})")]
    Capacity { len: usize, limit: usize },

    #[error("format error: {msg}{}", location(*.offset, *.line))]
    Format {
        msg: String,
        offset: Option<u64>,
        line: Option<u64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn location(offset: Option<u64>, line: Option<u64>) -> String {
    match (offset, line) {
        (Some(o), _) => format!(" at byte offset {o}"),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        Error::Layout(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format_at(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            msg: msg.into(),
            offset: Some(offset),
            line: None,
        }
    }

    pub(crate) fn format_line(msg: impl Into<String>, line: u64) -> Self {
        Error::Format {
            msg: msg.into(),
            offset: None,
            line: Some(line),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
