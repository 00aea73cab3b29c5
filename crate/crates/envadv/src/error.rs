//! Error and result types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for corpus, DSP, training, and evaluation failures.
///
/// I/O errors carry the offending path: almost every operation here touches
/// many files (manifests, waveforms, checkpoints, caches), and an `io::Error`
/// without a path is useless in a run log.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("trials: {0}")]
    Trials(String),

    #[error("dsp: {0}")]
    Dsp(String),

    #[error("model: {0}")]
    Model(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("training: {0}")]
    Train(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("synth: {0}")]
    Synth(String),

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Wraps an I/O error with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a JSON (de)serialization error with a short context string.
    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
