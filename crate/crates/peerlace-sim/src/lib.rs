//! Single-process simulator of a peer-to-peer serverless training network.
//!
//! Each simulated peer owns a password-gated in-memory tensor store and
//! participates in a per-epoch state machine: heartbeat, shard-wise gradient
//! computation, in-store local averaging, a sync-queue barrier, robust
//! aggregation across peers, and an in-store model update. Membership is
//! managed by signed announcements and unanimous-consensus failure
//! detection; faults and Byzantine gradient attacks are injected from a
//! scenario description.
//!
//! Modules, bottom-up:
//!
//! * [`store`] — per-peer key-value tensor store with byte-transfer ledger,
//! * [`queue`] — FIFO message-queue service (send / peek / delete / purge),
//! * [`crypto`] — signatures, public-key encryption, key wrapping; real RSA
//!   and a fast deterministic fake behind one interface,
//! * [`identity`] — peer records, signed announcements, network init and
//!   new-peer join,
//! * [`data`] — synthetic two-Gaussian dataset generation and seed
//!   splitting,
//! * [`runtime`] — the per-peer epoch state machine and its phases,
//! * [`fault`] — crash / join schedules and attack specifications,
//! * [`scenario`] — scenario files, the end-to-end run loop, store-path
//!   comparison, and the scaling study,
//! * [`report`] — CSV and JSON emission.

pub mod crypto;
pub mod data;
pub mod fault;
pub mod identity;
pub mod queue;
pub mod report;
pub mod runtime;
pub mod scenario;
pub mod store;

mod error;

pub use error::SimError;

/// Base64 (standard alphabet) used for signatures, keys, and ciphertexts
/// wherever they appear inside JSON.
pub(crate) fn b64(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn b64_decode(s: &str) -> Result<Vec<u8>, SimError> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|_| SimError::Crypto("invalid base64"))
}
