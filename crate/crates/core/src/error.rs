use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the monitoring pipeline.
///
/// The variants are coarse error classes; each maps to a distinct process
/// exit code (see [`Error::exit_code`]) and a distinct FFI status code.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent configuration: bad bin edges, unknown layer keys,
    /// mismatched lengths, impossible model or dataset dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a precondition (non-finite values, bad labels,
    /// empty estimates).
    #[error("data error: {0}")]
    Data(String),

    /// A byte stream or text file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input written with an unsupported version or dtype.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Threshold calibration cannot proceed with the given profile.
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wraps an error with the pipeline stage that produced it.
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn calibration(msg: impl Into<String>) -> Self {
        Error::Calibration(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attributes this error to a named pipeline stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for this error class.
    ///
    /// | code | class          |
    /// |------|----------------|
    /// | 3    | configuration  |
    /// | 4    | data           |
    /// | 5    | format         |
    /// | 6    | compatibility  |
    /// | 7    | calibration    |
    /// | 8    | I/O            |
    ///
    /// Code 2 is reserved for command-line usage errors.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 3,
            Error::Data(_) => 4,
            Error::Format(_) => 5,
            Error::Compatibility(_) => 6,
            Error::Calibration(_) => 7,
            Error::Io { .. } => 8,
            Error::Stage { .. } => unreachable!("root() strips stage wrappers"),
        }
    }
}

/// Extension for attaching a stage name to fallible results.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
