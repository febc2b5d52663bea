use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u16 },

    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: String,
        needed: u64,
        available: u64,
    },

    #[error("non-finite value at bin {bin}, shot {shot}")]
    NonFinite { bin: usize, shot: usize },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("unknown preset {name:?}; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("track {track} does not fit the recording: {msg}")]
    TrackOutOfRange { track: usize, msg: String },

    #[error("underdetermined fit: need at least 2 distinct bins, got {0}")]
    Underdetermined(usize),

    #[error("inverted frame: start and end lines cross at bin {bin:.1}")]
    InvertedFrame { bin: f64 },

    #[error("frame for bin {bin} out of range: shots {start}..={end} outside [0, {shots})")]
    FrameOutOfRange {
        bin: usize,
        start: i64,
        end: i64,
        shots: usize,
    },

    #[error("sample longer than d_m: {len} > {d_m}")]
    SampleTooLong { len: usize, d_m: usize },

    #[error("class {0} is empty")]
    EmptyClass(String),

    #[error("shape mismatch at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("network has {net} outputs but dataset task has {task} classes")]
    ClassCountMismatch { net: usize, task: usize },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("backward called without a forward cache for this batch")]
    MissingCache,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for usage and
    /// configuration problems (including missing input files), 3 for
    /// unreadable or corrupt data, 4 for internal invariant failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::NonFinite { .. }
            | Error::Checksum { .. }
            | Error::Corrupt(_) => 3,
            Error::InvalidArgument(_)
            | Error::Config { .. }
            | Error::UnknownPreset { .. }
            | Error::TrackOutOfRange { .. }
            | Error::Underdetermined(_)
            | Error::InvertedFrame { .. }
            | Error::FrameOutOfRange { .. }
            | Error::SampleTooLong { .. }
            | Error::EmptyClass(_)
            | Error::ClassCountMismatch { .. }
            | Error::Shape { .. } => 2,
            Error::NonFiniteLoss | Error::MissingCache => 4,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
