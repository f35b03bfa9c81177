use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("bad magic {found:?} in {path}, expected \"VTW1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("malformed weight file header: {0}")]
    Header(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("schedule has {found} plans but the model has {depth} blocks")]
    ScheduleLength { found: usize, depth: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid image: {0}")]
    Image(String),

    #[error("{path}: {source}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
