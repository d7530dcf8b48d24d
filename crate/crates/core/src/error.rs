use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("point ({x:.3}, {y:.3}) is outside the raster domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("no valid data around ({x:.3}, {y:.3})")]
    Nodata { x: f64, y: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("raster geometry mismatch: {0}")]
    Geometry(String),

    #[error("raster too small: {0}")]
    Size(String),

    #[error("raster coverage gap along path between {from_m:.1} m and {to_m:.1} m")]
    Coverage { from_m: f64, to_m: f64 },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("denoiser failed at step t={step}: {message}")]
    Denoiser { step: usize, message: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("link {link}: {source}")]
    Link {
        link: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Attach a link identifier to an error coming out of the per-link pipeline.
    pub fn for_link(self, link: impl Into<String>) -> Self {
        Error::Link {
            link: link.into(),
            source: Box::new(self),
        }
    }
}
