use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The protocol accumulates no signal phase, so the sensitivity diverges.
    #[error("protocol is blind to the target field (accumulated phase is zero)")]
    BlindProtocol,

    /// `|<x>|` is within 1e-12 of 1 and the Fisher information is 0/0.
    #[error("degenerate Fisher information: <x> = {expect_x}")]
    DegenerateFisher { expect_x: f64 },

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("no snapshot recorded at iteration {0}")]
    MissingSnapshot(usize),

    #[error("need at least {needed} points for a growth fit, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Numerical failures map to exit status 3 in the command-line runner.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlindProtocol | Error::DegenerateFisher { .. } | Error::InsufficientData { .. }
        )
    }
}
