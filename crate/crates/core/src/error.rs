use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(
        "k-NN graph is disconnected ({n_components} components, sizes {sizes:?}); \
         increase the neighbor count k (currently {k})"
    )]
    Disconnected {
        n_components: usize,
        sizes: Vec<usize>,
        k: usize,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}
