use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what}: expected {expected}, found {found}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("overlapping UV charts at {} texel(s): {}", .0.len(), format_overlaps(.0))]
    UvOverlap(Vec<TexelOverlap>),

    #[error("pipeline stage `{stage}` failed: {detail}")]
    Pipeline { stage: &'static str, detail: String },

    #[error("missing saved state: {0}")]
    MissingState(&'static str),

    #[error("optimization diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {detail}")]
    Format { context: String, detail: String },

    #[error("{context}: unsupported version {found} (this build reads version {expected})")]
    Version {
        context: String,
        found: u32,
        expected: u32,
    },

    #[error("validation failed with {} problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    Validation(Vec<String>),
}

/// One texel center claimed by the interiors of more than one UV face.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TexelOverlap {
    pub u: u32,
    pub v: u32,
    pub faces: Vec<usize>,
}

fn format_overlaps(overlaps: &[TexelOverlap]) -> String {
    const SHOWN: usize = 8;
    let mut parts: Vec<String> = overlaps
        .iter()
        .take(SHOWN)
        .map(|o| format!("({}, {}) faces {:?}", o.u, o.v, o.faces))
        .collect();
    if overlaps.len() > SHOWN {
        parts.push(format!("... {} more", overlaps.len() - SHOWN));
    }
    parts.join(", ")
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
