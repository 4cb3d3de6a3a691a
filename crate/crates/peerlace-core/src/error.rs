use thiserror::Error;

/// Errors raised by the math and aggregation primitives.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    /// An operation over a sequence received no elements.
    #[error("empty input")]
    Empty,
    /// Two vectors (or a vector and a batch) disagree on length.
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in input")]
    NonFinite,
    /// A peer rank fell outside `0..n_peers`.
    #[error("rank {rank} out of range for {n_peers} peers")]
    RankOutOfRange { rank: usize, n_peers: usize },
    /// A dataset is too small to give every peer at least one row.
    #[error("{rows} rows cannot be split across {n_peers} peers")]
    RowsBelowPeers { rows: usize, n_peers: usize },
    /// The Byzantine bound `b` must stay below the number of gradients.
    #[error("byzantine bound {bound} must be < number of gradients {n}")]
    ByzantineBound { bound: usize, n: usize },
    /// A scalar parameter violated its precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}
