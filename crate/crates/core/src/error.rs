use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the model-building chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite sample at shot {shot}, receiver {receiver}, sample {sample}")]
    NonFiniteSample {
        shot: usize,
        receiver: usize,
        sample: usize,
    },

    #[error("non-finite trace sample at index {sample}")]
    NonFiniteInput { sample: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("coincident points ({x}, {z}): Green's function is singular")]
    Singularity { x: f64, z: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("gain stability check failed for (n, s) pairs: {}", format_pairs(.pairs))]
    Stability { pairs: Vec<(u32, f64, f64)> },

    #[error("source estimation failed: shot {shot} has no admissible receivers at s = {s}")]
    SourceEstimation { shot: usize, s: f64 },

    #[error("degenerate objective: every pair skipped at s = {s}, n = {n}")]
    DegenerateObjective { s: f64, n: u32 },

    #[error("weighting error: direction for s = {s}, n = {n} is identically zero")]
    ZeroDirection { s: f64, n: u32 },

    #[error("preconditioning error: pseudo-Hessian diagonal is identically zero")]
    ZeroHessian,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn format_pairs(pairs: &[(u32, f64, f64)]) -> String {
    pairs
        .iter()
        .map(|(n, s, ratio)| format!("(n={n}, s={s}, ratio={ratio:.3e})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Coarse error classes, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Stability,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Invalid(_) => ErrorClass::Config,
            Error::Io { .. } | Error::Format(_) | Error::Corrupt(_) | Error::NonFiniteSample { .. }
            | Error::NonFiniteInput { .. } => {
                ErrorClass::Io
            }
            Error::Stability { .. } => ErrorClass::Stability,
            Error::Singularity { .. }
            | Error::Domain(_)
            | Error::SourceEstimation { .. }
            | Error::DegenerateObjective { .. }
            | Error::ZeroDirection { .. }
            | Error::ZeroHessian
            | Error::GridMismatch(_) => ErrorClass::Numerical,
            Error::Stage { source, .. } => source.class(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
