//! Labeled example batches, rank-based partitioning, and sharding.
//!
//! A dataset, a peer's slice of it, and a single training shard are all the
//! same type: a [`LabeledBatch`]. Partitioning assigns each peer a contiguous
//! slice determined solely by its rank; sharding cuts a peer's slice into
//! fixed-size batches, the unit of gradient computation and of redistribution
//! after a peer failure.

use alloc::vec::Vec;

use crate::error::CoreError;

/// A block of `rows` labeled examples with `dim` features each.
///
/// Features are stored row-major; labels are binary (`0` or `1`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledBatch {
    /// Builds a batch, checking shape and label validity.
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self, CoreError> {
        if dim == 0 {
            return Err(CoreError::InvalidParameter("feature dimension must be > 0"));
        }
        if labels.is_empty() {
            return Err(CoreError::Empty);
        }
        if features.len() != labels.len() * dim {
            return Err(CoreError::LengthMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite);
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(CoreError::InvalidParameter("labels must be 0 or 1"));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// Feature row `i` as a slice of length `dim`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Copies rows `[start, end)` into a new batch.
    ///
    /// # Panics
    /// Panics if the range is empty or out of bounds; callers derive ranges
    /// from row counts they already hold.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.rows(), "invalid row range");
        Self {
            dim: self.dim,
            features: self.features[start * self.dim..end * self.dim].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

/// Returns the contiguous slice of `data` owned by `rank` out of `n_peers`.
///
/// All rows are covered, slices are disjoint, and sizes differ by at most
/// one: the first `rows mod n_peers` ranks each take one extra row.
pub fn partition_dataset(
    data: &LabeledBatch,
    n_peers: usize,
    rank: usize,
) -> Result<LabeledBatch, CoreError> {
    if n_peers == 0 {
        return Err(CoreError::InvalidParameter("n_peers must be > 0"));
    }
    if rank >= n_peers {
        return Err(CoreError::RankOutOfRange { rank, n_peers });
    }
    let rows = data.rows();
    if rows < n_peers {
        return Err(CoreError::RowsBelowPeers { rows, n_peers });
    }
    let base = rows / n_peers;
    let extra = rows % n_peers;
    // Ranks below `extra` hold base+1 rows; the slice start shifts by one for
    // each such rank before ours.
    let start = rank * base + rank.min(extra);
    let len = base + usize::from(rank < extra);
    Ok(data.slice_rows(start, start + len))
}

/// Cuts `peer_data` into consecutive shards of `batch_size` rows; the final
/// shard may be smaller. Concatenating the shards reproduces the input order.
pub fn shard(peer_data: &LabeledBatch, batch_size: usize) -> Result<Vec<LabeledBatch>, CoreError> {
    if batch_size == 0 {
        return Err(CoreError::InvalidParameter("batch_size must be > 0"));
    }
    let rows = peer_data.rows();
    let mut shards = Vec::with_capacity(rows.div_ceil(batch_size));
    let mut start = 0;
    while start < rows {
        let end = (start + batch_size).min(rows);
        shards.push(peer_data.slice_rows(start, end));
        start = end;
    }
    Ok(shards)
}
