//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by volume construction, geometry checks, the correction
/// kernel, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A voxel index fell outside the grid.
    #[error("voxel index ({i}, {j}, {k}) out of bounds for grid {nx}x{ny}x{nz}")]
    OutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        nx: usize,
        ny: usize,
        nz: usize,
    },

    /// Grid construction or validation failed.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// Two grids that must be aligned are not.
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    /// An invalid parameter value.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A malformed file, with the byte offset where parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A required DICOM tag was absent.
    #[error("missing required DICOM tag {name} ({group:04X},{element:04X}) in {path}")]
    MissingTag {
        name: &'static str,
        group: u16,
        element: u16,
        path: String,
    },

    /// An unsupported DICOM encoding.
    #[error("unsupported DICOM data: {0}")]
    UnsupportedDicom(String),

    /// A malformed phantom suite entry, identified by case name.
    #[error("suite case {case:?}: {message}")]
    SuiteCase { case: String, message: String },

    #[error("i/o error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
