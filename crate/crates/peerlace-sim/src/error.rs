use peerlace_core::CoreError;
use thiserror::Error;

/// Errors raised by the simulation layer.
#[derive(Debug, Error)]
pub enum SimError {
    /// A store operation presented the wrong password.
    #[error("authentication failed for store {0}")]
    Auth(String),
    /// A store key or queue lookup missed.
    #[error("not found: {0}")]
    NotFound(String),
    /// The target store is crashed / unreachable.
    #[error("store {0} is unreachable")]
    Unreachable(String),
    /// Ciphertext failed to decrypt or verify.
    #[error("crypto failure: {0}")]
    Crypto(&'static str),
    /// An announcement's signature did not verify.
    #[error("signature verification failed for rank {0}")]
    BadSignature(usize),
    /// A joining peer reused an existing rank.
    #[error("rank {0} already present in the network")]
    RankCollision(usize),
    /// A scenario or CLI parameter is invalid; reported before any epoch runs.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// Process exit code for the CLI: configuration problems exit 2, runtime
    /// failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) | SimError::Json(_) => 2,
            _ => 1,
        }
    }
}
