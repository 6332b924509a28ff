//! Crate-wide error type.
//!
//! Variants are grouped by who can fix them: bad architectures, specs or
//! configs are caller errors; `NonFinite` and `Internal` indicate a numeric
//! blow-up or a bug and map to a distinct process exit code in the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Architecture fails validation (shape mismatch, unsupported layout, ...).
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    /// A subnet spec violates the selection rules for its architecture.
    #[error("invalid subnet spec: {0}")]
    InvalidSpec(String),

    /// A hidden layer is too narrow to host a subnet of the requested width.
    #[error("layer {layer} is too narrow: width {width}, need more than {need}")]
    LayerTooNarrow { layer: usize, width: usize, need: usize },

    /// Target class index out of range for the classifier.
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    /// Two artifacts disagree about the architecture they describe.
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    /// Malformed model / patch / spec / dataset file.
    #[error("format error: {0}")]
    Format(String),

    /// Stored checksum does not match the recomputed one.
    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(String),

    /// Bad run configuration or option combination.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset contents are inconsistent (label range, element counts, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A perspective warp collapsed the trigger to a degenerate quad.
    #[error("degenerate warp: {0}")]
    DegenerateWarp(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Invariant breakage that indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors that signal a numeric or internal failure rather than
    /// bad user input; the CLI maps these to exit code 2.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::Internal(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
