//! Per-peer in-memory tensor store with byte-transfer accounting.
//!
//! Each peer owns one [`PeerStore`]: a password-gated key → vector map that
//! stands in for an in-memory database. The store supports two styles of
//! computation: the *external* path (fetch tensors out, compute, store the
//! result back — every byte crossing the store boundary is charged to the
//! [`TransferLedger`]) and the *in-store* path (averaging and model updates
//! executed inside the store, charged only a flat command overhead). Both
//! paths produce bit-identical numerics; the ledger difference is the whole
//! point, standing in for network time measurements that would not be
//! reproducible here.
//!
//! A store can be marked crashed by fault injection, after which every
//! operation — including the heartbeat [`PeerStore::ping`] — fails as
//! unreachable.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use peerlace_core::aggregation;
use peerlace_core::{CoreError, DenseVector};
use serde::{Deserialize, Serialize};

use crate::SimError;

/// How transferred bytes are counted: a fixed cost per vector element plus a
/// flat per-command overhead for in-store operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByteConvention {
    pub bytes_per_value: u64,
    pub command_overhead: u64,
}

impl Default for ByteConvention {
    fn default() -> Self {
        // 8 bytes per 64-bit float; 64 bytes covers a command name, key
        // names, and framing for an in-store call.
        Self {
            bytes_per_value: 8,
            command_overhead: 64,
        }
    }
}

/// A (host, port)-like store identity, so peer records can carry an address
/// the way they would for a real networked database.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StoreAddress {
    pub host: String,
    pub port: u16,
}

impl StoreAddress {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
        }
    }
}

impl fmt::Display for StoreAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// Byte counters for one operation label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub calls: u64,
}

/// Monotone byte counters for everything that crossed the store boundary,
/// split per operation label. `bytes_in` is data written into the store,
/// `bytes_out` data read out of it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TransferLedger {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub per_op: BTreeMap<&'static str, OpCounters>,
}

impl TransferLedger {
    fn charge(&mut self, op: &'static str, bytes_in: u64, bytes_out: u64) {
        self.bytes_in += bytes_in;
        self.bytes_out += bytes_out;
        let c = self.per_op.entry(op).or_default();
        c.bytes_in += bytes_in;
        c.bytes_out += bytes_out;
        c.calls += 1;
    }
}

struct Inner {
    tensors: BTreeMap<String, DenseVector>,
    ledger: TransferLedger,
    crashed: bool,
}

/// A password-gated in-memory tensor store. Safe for concurrent use; every
/// operation, including its ledger charge, is applied atomically.
pub struct PeerStore {
    address: StoreAddress,
    password: String,
    convention: ByteConvention,
    inner: Mutex<Inner>,
}

impl fmt::Debug for PeerStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // The password is deliberately omitted.
        f.debug_struct("PeerStore")
            .field("address", &self.address)
            .finish_non_exhaustive()
    }
}

impl PeerStore {
    pub fn new(address: StoreAddress, password: impl Into<String>, convention: ByteConvention) -> Self {
        Self {
            address,
            password: password.into(),
            convention,
            inner: Mutex::new(Inner {
                tensors: BTreeMap::new(),
                ledger: TransferLedger::default(),
                crashed: false,
            }),
        }
    }

    pub fn address(&self) -> &StoreAddress {
        &self.address
    }

    /// Reachability probe used by heartbeat monitoring. Needs no password:
    /// it models a connection attempt, not a query.
    pub fn ping(&self) -> bool {
        !self.inner.lock().unwrap().crashed
    }

    /// Fault-injection hook: a crashed store rejects everything.
    pub fn set_crashed(&self, crashed: bool) {
        self.inner.lock().unwrap().crashed = crashed;
    }

    /// Checks reachability and the password, in that order: an unreachable
    /// host never gets to evaluate credentials.
    fn admit<'a>(&'a self, password: &str) -> Result<std::sync::MutexGuard<'a, Inner>, SimError> {
        let inner = self.inner.lock().unwrap();
        if inner.crashed {
            return Err(SimError::Unreachable(self.address.to_string()));
        }
        if password != self.password {
            return Err(SimError::Auth(self.address.to_string()));
        }
        Ok(inner)
    }

    /// Stores `v` under `key`, charging its full size as inbound transfer.
    pub fn put_tensor(&self, password: &str, key: &str, v: DenseVector) -> Result<(), SimError> {
        let mut inner = self.admit(password)?;
        let bytes = self.convention.bytes_per_value * v.len() as u64;
        inner.ledger.charge("put_tensor", bytes, 0);
        inner.tensors.insert(key.to_string(), v);
        Ok(())
    }

    /// Fetches the tensor under `key`, charging its size as outbound.
    pub fn get_tensor(&self, password: &str, key: &str) -> Result<DenseVector, SimError> {
        let mut inner = self.admit(password)?;
        let v = inner
            .tensors
            .get(key)
            .cloned()
            .ok_or_else(|| SimError::NotFound(key.to_string()))?;
        let bytes = self.convention.bytes_per_value * v.len() as u64;
        inner.ledger.charge("get_tensor", 0, bytes);
        Ok(v)
    }

    /// Removes `key` if present, returning whether it existed. Free of
    /// charge: it models housekeeping, not data movement.
    pub fn delete_tensor(&self, password: &str, key: &str) -> Result<bool, SimError> {
        let mut inner = self.admit(password)?;
        Ok(inner.tensors.remove(key).is_some())
    }

    /// True if `key` currently holds a tensor.
    pub fn contains(&self, password: &str, key: &str) -> Result<bool, SimError> {
        let inner = self.admit(password)?;
        Ok(inner.tensors.contains_key(key))
    }

    /// Averages the tensors under `keys` into `out_key` without any tensor
    /// leaving the store; only the flat command overhead is charged.
    /// Numerically identical to fetching and averaging outside.
    pub fn instore_average(
        &self,
        password: &str,
        keys: &[String],
        out_key: &str,
    ) -> Result<(), SimError> {
        let mut inner = self.admit(password)?;
        let grads = collect_tensors(&inner.tensors, keys)?;
        let mean = aggregation::average(&grads)?;
        inner
            .ledger
            .charge("instore_average", self.convention.command_overhead, 0);
        inner.tensors.insert(out_key.to_string(), mean);
        Ok(())
    }

    /// Applies `model ← model − learning_rate · grad` inside the store,
    /// charging only the command overhead.
    pub fn instore_model_update(
        &self,
        password: &str,
        model_key: &str,
        grad_key: &str,
        learning_rate: f64,
    ) -> Result<(), SimError> {
        let mut inner = self.admit(password)?;
        let model = lookup(&inner.tensors, model_key)?;
        let grad = lookup(&inner.tensors, grad_key)?;
        let updated = model.minus_scaled(grad, learning_rate)?;
        inner
            .ledger
            .charge("instore_model_update", self.convention.command_overhead, 0);
        inner.tensors.insert(model_key.to_string(), updated);
        Ok(())
    }

    /// The fetch-process-restore baseline for averaging: every input tensor
    /// is charged out, the mean is computed outside, and the result charged
    /// back in. Bit-identical output to [`Self::instore_average`].
    pub fn external_average(
        &self,
        password: &str,
        keys: &[String],
        out_key: &str,
    ) -> Result<(), SimError> {
        let mut inner = self.admit(password)?;
        let grads = collect_tensors(&inner.tensors, keys)?;
        let fetched: u64 = grads
            .iter()
            .map(|g| self.convention.bytes_per_value * g.len() as u64)
            .sum();
        let mean = aggregation::average(&grads)?;
        let stored = self.convention.bytes_per_value * mean.len() as u64;
        inner.ledger.charge("external_average", stored, fetched);
        inner.tensors.insert(out_key.to_string(), mean);
        Ok(())
    }

    /// The fetch-process-restore baseline for the model update: model and
    /// gradient out, updated model back in. Bit-identical to
    /// [`Self::instore_model_update`].
    pub fn external_model_update(
        &self,
        password: &str,
        model_key: &str,
        grad_key: &str,
        learning_rate: f64,
    ) -> Result<(), SimError> {
        let mut inner = self.admit(password)?;
        let model = lookup(&inner.tensors, model_key)?;
        let grad = lookup(&inner.tensors, grad_key)?;
        let out = self.convention.bytes_per_value * (model.len() + grad.len()) as u64;
        let updated = model.minus_scaled(grad, learning_rate)?;
        let back = self.convention.bytes_per_value * updated.len() as u64;
        inner.ledger.charge("external_model_update", back, out);
        inner.tensors.insert(model_key.to_string(), updated);
        Ok(())
    }

    /// A consistent snapshot of the transfer ledger. Needs no password: the
    /// ledger is the experimenter's instrument, not peer data.
    pub fn ledger_report(&self) -> TransferLedger {
        self.inner.lock().unwrap().ledger.clone()
    }

    /// Out-of-band read for assertions and consistency checks: no password,
    /// no ledger charge, and it works even on a crashed store (think of it
    /// as the experimenter inspecting the host directly). Simulated peers
    /// must never use this.
    pub fn inspect_tensor(&self, key: &str) -> Option<DenseVector> {
        self.inner.lock().unwrap().tensors.get(key).cloned()
    }
}

fn lookup<'a>(
    tensors: &'a BTreeMap<String, DenseVector>,
    key: &str,
) -> Result<&'a DenseVector, SimError> {
    tensors.get(key).ok_or_else(|| SimError::NotFound(key.to_string()))
}

fn collect_tensors(
    tensors: &BTreeMap<String, DenseVector>,
    keys: &[String],
) -> Result<Vec<DenseVector>, SimError> {
    if keys.is_empty() {
        return Err(SimError::Core(CoreError::Empty));
    }
    keys.iter().map(|k| lookup(tensors, k).cloned()).collect()
}
