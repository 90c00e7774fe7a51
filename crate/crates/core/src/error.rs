use thiserror::Error;

/// Errors produced by the light-field depth pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Dataset layout or shape violations (view counts, mismatched sizes,
    /// unusable angular grids).
    #[error("structure error: {0}")]
    Structure(String),
    /// Malformed file contents (PFM headers, truncated payloads, bad PNGs).
    #[error("format error: {0}")]
    Format(String),
    /// Missing or inconsistent calibration parameters.
    #[error("calibration error: {0}")]
    Calibration(String),
    /// An operation was asked to run on an empty input (no valid pixels,
    /// no surviving seeds, all-zero weights).
    #[error("no data: {0}")]
    NoData(String),
    /// Index outside the valid range of an angular axis or grid.
    #[error("index out of range: {0}")]
    Index(String),
    /// Image too small for the requested operation (descriptor support,
    /// pyramid depth).
    #[error("size error: {0}")]
    Size(String),
    /// Invalid synthetic scene description.
    #[error("scene spec error: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Structure(_) | Error::Index(_) | Error::Size(_) | Error::Spec(_) => 2,
            Error::Format(_) => 3,
            Error::Calibration(_) => 4,
            Error::NoData(_) => 5,
            Error::Config(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
