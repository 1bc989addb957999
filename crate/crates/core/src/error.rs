use std::path::PathBuf;

use thiserror::Error;

use crate::registry::Namespace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("index {index} out of bounds for {len} rows")]
    Bounds { index: usize, len: usize },

    #[error("{namespace} plugin '{name}' already registered by {existing}; rejected registration from {incoming}")]
    RegistrationConflict {
        namespace: Namespace,
        name: String,
        existing: String,
        incoming: String,
    },

    #[error("unknown {namespace} '{name}'; registered: [{}]", available.join(", "))]
    Lookup {
        namespace: Namespace,
        name: String,
        available: Vec<String>,
    },

    #[error("unknown config key '{0}'")]
    UnknownKey(String),

    #[error("invalid value for '{key}': {message}")]
    ConfigValue { key: String, message: String },

    #[error("{component} rejected its configuration: {message}")]
    Construction { component: String, message: String },

    #[error("loss scale fell below minimum {min} (attempted {attempted}); training diverged")]
    Divergence { attempted: f64, min: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("checkpoint version {found} is newer than supported version {current}")]
    ForwardIncompatible { found: u32, current: u32 },

    #[error("no upgrade rule from checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
