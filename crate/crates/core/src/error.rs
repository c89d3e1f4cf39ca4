use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown token '{word}' in prompt \"{prompt}\"")]
    Tokenize { word: String, prompt: String },

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint mismatch at `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFinite { iteration: usize, components: String },

    #[error("no pixel survives the depth mask (cap {cap} m)")]
    EmptyMask { cap: f64 },

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn checkpoint(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn file(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::File {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
