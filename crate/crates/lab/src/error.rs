use std::path::PathBuf;

use faster_core::Error as CoreError;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Config(String),

    #[error("{path}: not a dataset file (bad magic {found:?})")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported {what} version {found} (this build reads {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        what: &'static str,
        found: u64,
        supported: u64,
    },

    #[error("{path}: truncated at byte {offset}: {detail}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: sample {id} has label {label}, dataset has {classes} classes")]
    LabelOutOfRange {
        path: PathBuf,
        id: u32,
        label: u16,
        classes: usize,
    },

    #[error("{0}")]
    Data(String),

    #[error("checkpoint {path}: checksum mismatch for tensor '{tensor}' (manifest {expected:08x}, data {actual:08x})")]
    Checksum {
        path: PathBuf,
        tensor: String,
        expected: u32,
        actual: u32,
    },

    #[error("checkpoint {path}: tensor '{tensor}' shape mismatch: {detail}")]
    ShapeMismatch {
        path: PathBuf,
        tensor: String,
        detail: String,
    },

    #[error("checkpoint {path}: malformed manifest: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 data, 4 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::BadMagic { .. }
            | LabError::UnsupportedVersion { .. }
            | LabError::Truncated { .. }
            | LabError::LabelOutOfRange { .. }
            | LabError::Data(_)
            | LabError::Checksum { .. }
            | LabError::ShapeMismatch { .. }
            | LabError::Manifest { .. } => 3,
            LabError::Numeric(_) => 4,
            LabError::Io { .. } => 1,
            LabError::Core(e) => match e {
                CoreError::Config(_) | CoreError::InfeasiblePattern { .. } => 2,
                CoreError::LabelOutOfRange { .. } | CoreError::Empty(_) => 3,
                CoreError::NonFinite { .. } => 4,
                _ => 1,
            },
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}
