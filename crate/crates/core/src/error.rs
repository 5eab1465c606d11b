use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty grammar: {0}")]
    EmptyGrammar(&'static str),

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing click set for query {0:?}")]
    MissingClickSet(String),

    #[error("undefined increment for unretrievable query")]
    UnretrievableQuery,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("sequence does not terminate with EOS")]
    Unterminated,

    #[error("zero-length rewrite")]
    EmptyRewrite,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("corrupt artifact {path}: {reason}")]
    CorruptArtifact { path: PathBuf, reason: String },

    #[error("reward evaluation failed for query {query:?}: {source}")]
    Reward {
        query: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run directory {0} is locked by another invocation")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
