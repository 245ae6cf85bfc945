use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot encode image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("images do not overlap")]
    EmptyOverlap,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("conflicting hard constraints at pixel ({x}, {y})")]
    ConstraintConflict { x: usize, y: usize },

    #[error("graph has no active nodes")]
    NoActiveNodes,

    #[error("unanchored cut: overlap has no {0} anchor")]
    Unanchored(&'static str),

    #[error("empty seam")]
    EmptySeam,

    #[error("no seam pixel has a scorable window")]
    UnscorableSeam,

    #[error("patch too small: {width}x{height}, need at least {min}x{min}")]
    PatchTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("{flagged} of {total} warped samples fell outside valid content")]
    WarpOutOfBounds { flagged: usize, total: usize },

    #[error("cannot load manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("seam does not cross the patch")]
    SeamMissesPatch,
}
