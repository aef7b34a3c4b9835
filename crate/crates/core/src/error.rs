//! Error type shared by all modules in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by tensor operations, datasets, networks, and pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A file does not match the expected binary layout.
    #[error("format error: {0}")]
    Format(String),

    /// Two collections that must agree (images/labels, maps/samples) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A class label is outside `[0, num_classes)`.
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    /// An attribution target class is outside `[0, num_classes)`.
    #[error("target class {target} out of range for {num_classes} classes")]
    Target { target: usize, num_classes: usize },

    /// A gradient tape does not match the network or batch it is used with.
    #[error("stale tape: {0}")]
    StaleTape(String),

    /// The operation requires the network to be in inference mode.
    #[error("{0} requires the network to be in inference mode")]
    InferenceModeRequired(&'static str),

    /// A per-sample failure inside a dataset-wide operation.
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// The operation needs a nonempty dataset.
    #[error("empty dataset")]
    EmptyDataset,

    /// An underlying I/O failure, tagged with the path involved.
    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn at_sample(index: usize, source: Error) -> Self {
        Error::Sample {
            index,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
