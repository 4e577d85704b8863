use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two grids that must agree in size do not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A point lies on the camera plane and cannot be projected.
    #[error("degenerate projection: |z| = {z:e} is below 1e-12")]
    DegenerateProjection { z: f64 },

    /// A transformed point ended up behind the camera.
    #[error("point behind camera after transform (z = {z:e})")]
    BehindCamera { z: f64 },

    /// A file did not conform to its format.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Optimization left the admissible region.
    #[error("divergence in stage '{stage}' at step {step}: loss = {loss}")]
    Divergence { stage: String, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
