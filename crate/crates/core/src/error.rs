use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to render a single
/// diagnostic line; the CLI relies on `Display` being newline-free.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: String, details: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("more GT nodes than queries: {gt} > {queries}")]
    GtExceedsQueries { gt: usize, queries: usize },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch { op: op.to_string(), details: details.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gt_exceeds_queries_message_is_pinned() {
        let e = Error::GtExceedsQueries { gt: 9, queries: 8 };
        let msg = e.to_string();
        assert!(
            msg.starts_with("more GT nodes than queries"),
            "matcher error must keep its documented message, got: {msg}"
        );
    }

    #[test]
    fn display_is_single_line() {
        let samples = [
            Error::InvalidInput("x".into()),
            Error::shape("matmul", "2x3 vs 4x5"),
            Error::NonFinite("hungarian cost".into()),
            Error::Format("bad version".into()),
        ];
        for e in samples {
            assert!(!e.to_string().contains('\n'), "error text must be one line: {e}");
        }
    }
}
