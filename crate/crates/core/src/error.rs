use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed content in an input file, located by file and field.
    #[error("{}: {field}: {message}", path.display())]
    Format {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("{}: {field}: size {got_w}x{got_h} does not match camera {want_w}x{want_h}", path.display())]
    SizeMismatch {
        path: PathBuf,
        field: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },

    #[error("invalid {what}: {message}")]
    Invalid { what: &'static str, message: String },

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE)")]
    UnsupportedCameraModel(String),

    #[error("image `{image}` references unregistered camera {camera_id}")]
    UnregisteredCamera { image: String, camera_id: u32 },

    #[error("shape mismatch: expected {expected} entries, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("mesh has no faces")]
    EmptyMesh,

    #[error("zero-resolution image")]
    ZeroResolution,

    #[error("path records missing for pixel {pixel}")]
    MissingRecords { pixel: usize },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("camera index {index} out of range ({count} views)")]
    CameraIndex { index: usize, count: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(what: &'static str, message: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            message: message.into(),
        }
    }
}
