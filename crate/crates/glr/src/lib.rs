//! Novel view synthesis from posed images: plane sweep volumes feed a
//! convolutional renderer that collapses the depth dimension into one image.
//!
//! The crate is organized along the data path:
//! [`camera`] (pinhole geometry, homographies, depth sampling) →
//! [`psv`] (warping and volume assembly) →
//! [`convglr`] (the renderer network) on top of [`tensor`] (a minimal
//! deterministic differentiable engine) →
//! [`scenes`] (procedural ground truth and metrics) →
//! [`harness`] (training/evaluation loops) → [`cli`].
//!
//! Everything is single-threaded and deterministic: identical inputs and
//! seeds produce bit-identical outputs, including trained checkpoints.

pub mod camera;
pub mod cli;
pub mod container;
pub mod convglr;
pub mod harness;
pub mod psv;
pub mod scenes;
pub mod selftest;
pub mod tensor;

/// Crate-wide error type. Variants map onto CLI exit codes: input problems
/// (`Io`, `MissingFile`, `Parse`, `Config`, `Bounds`) exit 2, computation
/// failures exit 1.
#[derive(Debug, thiserror::Error)]
pub enum GlrError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("bounds: {0}")]
    Bounds(String),
    #[error("point behind camera: {0}")]
    BehindCamera(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("linear algebra: {0}")]
    LinAlg(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl GlrError {
    /// CLI exit code: 2 for input/usage problems, 1 for computation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            GlrError::Io(_)
            | GlrError::MissingFile(_)
            | GlrError::Parse { .. }
            | GlrError::Config(_)
            | GlrError::Bounds(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GlrError>;
