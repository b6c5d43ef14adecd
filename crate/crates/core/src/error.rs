use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad parameter, mismatched sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("point cloud has no normals but a finite normal-angle threshold was requested")]
    MissingNormals,

    #[error("point cloud has no colors but a finite color-distance threshold was requested")]
    MissingColors,

    #[error("initial segmentation has no instances")]
    NoInstances,

    #[error("non-finite gradient in M-step (probabilities saturated without clamping)")]
    NonFiniteGradient,

    #[error("primitive {part} has zero surface area")]
    EmptyPart { part: usize },

    #[error("no scenes given")]
    NoScenes,

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error stems from a violated precondition rather than bad
    /// input data or the environment.
    pub fn is_contract_violation(&self) -> bool {
        match self {
            Error::Contract(_) => true,
            Error::Stage { source, .. } => source.is_contract_violation(),
            _ => false,
        }
    }
}
