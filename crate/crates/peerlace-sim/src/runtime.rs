//! The per-peer epoch state machine.
//!
//! Every training epoch runs as a fixed sequence of phases, globally
//! ordered across peers (peers may execute one phase concurrently, but no
//! peer enters the next phase before all have finished the current one):
//!
//! 1. **heartbeat** — probe every active peer's store, mark unreachable
//!    peers locally inactive, publish the local inactive list, clean up the
//!    previous epoch's keys and stale sync messages;
//! 2. **compute** — fetch the model from the own store and compute one
//!    gradient per data shard, storing each;
//! 3. **share** — average the shard gradients *inside* the store into the
//!    published local gradient (a malicious peer overwrites it with a
//!    corrupted one), then post a sync message to every active peer;
//! 4. **barrier** — wait until every active peer's sync message for this
//!    epoch arrived, or give up after a timeout and carry on without the
//!    missing peers;
//! 5. **aggregate** — fetch all reachable peers' published gradients and
//!    combine them with the configured robust rule;
//! 6. **update** — apply the aggregated gradient to the model replica
//!    in-store, then report loss and accuracy;
//! 7. **consensus** — read every reachable peer's published inactive list
//!    and confirm exactly the failures *everyone* agrees on.
//!
//! Failure detection is therefore two-staged: a peer is *locally* inactive
//! as soon as its heartbeat fails (it stops being waited for), but its data
//! is redistributed only after the unanimous consensus of step 7.

use std::collections::{BTreeMap, BTreeSet};

use peerlace_core::aggregation::{self, AggregationRule, ZenoConfig};
use peerlace_core::attack as core_attack;
use peerlace_core::dataset::{partition_dataset, shard};
use peerlace_core::logistic::{accuracy, compute_gradient, forward_loss};
use peerlace_core::{CoreError, DenseVector, LabeledBatch, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::concat_batches;
use crate::fault::AttackSpec;
use crate::identity::{PeerIdentity, StoreDirectory};
use crate::queue::QueueService;
use crate::SimError;

/// Key of the model replica in every peer's store.
pub const MODEL_KEY: &str = "model";

pub fn grad_key(epoch: u64, shard_index: usize) -> String {
    format!("grad:{epoch}:{shard_index}")
}

pub fn local_avg_key(epoch: u64) -> String {
    format!("localavg:{epoch}")
}

pub fn agg_key(epoch: u64) -> String {
    format!("agg:{epoch}")
}

pub fn inactive_key(epoch: u64) -> String {
    format!("inactive:{epoch}")
}

pub fn sync_queue_name(rank: usize) -> String {
    format!("sync-{rank}")
}

/// Heartbeat failure-detection knobs: how long one probe may take in
/// simulated ticks, and how many failed probes declare a peer down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatConfig {
    pub timeout_ticks: u64,
    pub trials: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self {
            timeout_ticks: 5,
            trials: 3,
        }
    }
}

/// The sync message every peer posts after publishing its local gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SyncMessage {
    epoch: u64,
    rank: usize,
}

/// Run-wide constants shared by all peer runtimes.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub heartbeat: HeartbeatConfig,
    pub barrier_timeout_ticks: u64,
    pub rule: AggregationRule,
    /// Present exactly when the rule needs loss-based scoring.
    pub zeno: Option<ZenoConfig>,
    /// Shared held-out batch all peers report accuracy on.
    pub validation: LabeledBatch,
}

/// What the heartbeat phase observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeartbeatReport {
    /// Ranks that failed probing this epoch (already removed from the
    /// active set when this is returned).
    pub newly_inactive: BTreeSet<usize>,
    /// Probe count per probed rank: 1 for a live peer, `trials` for a dead
    /// one.
    pub probes: BTreeMap<usize, u32>,
}

/// How the sync barrier resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BarrierOutcome {
    /// Every active peer checked in.
    Complete,
    /// These active peers never checked in within the timeout; the epoch
    /// proceeds without them.
    TimedOut(BTreeSet<usize>),
}

/// Loss and accuracy after this epoch's model update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// One peer's live state across epochs.
pub struct PeerRuntime {
    pub identity: PeerIdentity,
    /// This peer's slice of the training data…
    pub partition: LabeledBatch,
    /// …cut into fixed-size shards, one gradient each per epoch.
    pub shards: Vec<LabeledBatch>,
    /// Ranks this peer currently treats as participating, itself included.
    pub active: BTreeSet<usize>,
    /// Ranks whose heartbeat failed, as seen by this peer alone.
    pub inactive_local: BTreeSet<usize>,
    /// Ranks whose failure the whole network has confirmed.
    pub confirmed_inactive: BTreeSet<usize>,
    /// Cached copy of the model replica in this peer's store.
    pub model: ModelParams,
    pub attack: AttackSpec,
    attack_rng: ChaCha20Rng,
    /// Set once the peer crashed; a crashed runtime executes no phases.
    pub crashed: bool,
    /// Human-readable annotations for the current epoch's report row.
    /// Comma-free by convention so they embed directly in CSV.
    pub events: Vec<String>,
    grads: Vec<DenseVector>,
    aggregated: Option<DenseVector>,
}

impl PeerRuntime {
    /// Builds a runtime around an established identity. The caller must
    /// have seeded `MODEL_KEY` in the peer's store with `model` already.
    pub fn new(
        identity: PeerIdentity,
        partition: LabeledBatch,
        batch_size: usize,
        active: BTreeSet<usize>,
        model: ModelParams,
        attack: AttackSpec,
        attack_seed: u64,
    ) -> Result<Self, SimError> {
        let shards = shard(&partition, batch_size)?;
        Ok(Self {
            identity,
            partition,
            shards,
            active,
            inactive_local: BTreeSet::new(),
            confirmed_inactive: BTreeSet::new(),
            model,
            attack,
            attack_rng: ChaCha20Rng::seed_from_u64(attack_seed),
            crashed: false,
            events: Vec::new(),
            grads: Vec::new(),
            aggregated: None,
        })
    }

    pub fn rank(&self) -> usize {
        self.identity.rank
    }

    fn password(&self) -> &str {
        &self.identity.store_password
    }

    /// Takes and clears this epoch's event annotations.
    pub fn drain_events(&mut self) -> Vec<String> {
        std::mem::take(&mut self.events)
    }

    /// Phase 1: housekeeping, probing, and publishing the inactive list.
    pub fn phase_heartbeat(
        &mut self,
        epoch: u64,
        params: &RunParams,
        directory: &StoreDirectory,
        queues: &QueueService,
    ) -> Result<HeartbeatReport, SimError> {
        // Drop the previous epoch's working keys and any sync messages
        // from earlier epochs still sitting in the own queue.
        if let Some(prev) = epoch.checked_sub(1) {
            let store = &self.identity.store;
            for i in 0..self.shards.len() {
                store.delete_tensor(self.password(), &grad_key(prev, i))?;
            }
            store.delete_tensor(self.password(), &local_avg_key(prev))?;
            store.delete_tensor(self.password(), &agg_key(prev))?;
            store.delete_tensor(self.password(), &inactive_key(prev))?;
        }
        let own_sync = sync_queue_name(self.rank());
        for msg in queues.receive(&own_sync, usize::MAX) {
            let stale = match serde_json::from_slice::<SyncMessage>(&msg.payload) {
                Ok(sync) => sync.epoch < epoch,
                Err(_) => true,
            };
            if stale {
                queues.delete(&own_sync, msg.id)?;
            }
        }

        // Probe everyone else currently considered active.
        let mut probes = BTreeMap::new();
        let mut newly_inactive = BTreeSet::new();
        for &rank in &self.active {
            if rank == self.rank() {
                continue;
            }
            let record = &self.identity.trusted[&rank].record;
            let store = directory.resolve(record)?;
            if store.ping() {
                probes.insert(rank, 1);
            } else {
                // A dead store stays dead for the whole phase: each retry
                // burns `timeout_ticks` simulated ticks and fails again.
                probes.insert(rank, params.heartbeat.trials);
                newly_inactive.insert(rank);
            }
        }
        for &rank in &newly_inactive {
            self.active.remove(&rank);
            self.inactive_local.insert(rank);
            self.events.push(format!("detected_inactive:{rank}"));
        }

        // Publish what this peer currently believes is down, so consensus
        // later this epoch reads a consistent snapshot.
        self.identity.store.put_tensor(
            self.password(),
            &inactive_key(epoch),
            encode_rank_set(&self.inactive_local),
        )?;
        Ok(HeartbeatReport {
            newly_inactive,
            probes,
        })
    }

    /// Phase 2: fetch the model and compute one gradient per shard.
    pub fn phase_compute(&mut self, epoch: u64, _params: &RunParams) -> Result<(), SimError> {
        let flat = self
            .identity
            .store
            .get_tensor(self.password(), MODEL_KEY)?;
        self.model = ModelParams::from_flat(&flat)?;
        self.grads.clear();
        for (i, batch) in self.shards.iter().enumerate() {
            let g = compute_gradient(&self.model, batch)?;
            self.identity
                .store
                .put_tensor(self.password(), &grad_key(epoch, i), g.clone())?;
            self.grads.push(g);
        }
        Ok(())
    }

    /// Phase 3: in-store local averaging, adversarial overwrite if this
    /// peer is malicious, and the sync broadcast.
    pub fn phase_share(
        &mut self,
        epoch: u64,
        _params: &RunParams,
        queues: &QueueService,
    ) -> Result<(), SimError> {
        let keys: Vec<String> = (0..self.shards.len()).map(|i| grad_key(epoch, i)).collect();
        self.identity
            .store
            .instore_average(self.password(), &keys, &local_avg_key(epoch))?;

        if self.attack.is_malicious(self.rank()) {
            let honest = aggregation::average(&self.grads)?;
            let corrupted = match &self.attack {
                AttackSpec::SignFlip { epsilon, .. } => core_attack::sign_flip(&honest, *epsilon),
                AttackSpec::GaussianNoise { sigma, .. } => {
                    core_attack::gaussian_noise(&honest, *sigma, &mut self.attack_rng)?
                }
                AttackSpec::None => unreachable!("no rank is malicious under AttackSpec::None"),
            };
            self.identity
                .store
                .put_tensor(self.password(), &local_avg_key(epoch), corrupted)?;
            self.events.push("published_corrupted_gradient".into());
        }

        let payload = serde_json::to_vec(&SyncMessage {
            epoch,
            rank: self.rank(),
        })?;
        for &rank in &self.active {
            queues.send(&sync_queue_name(rank), self.rank(), payload.clone());
        }
        Ok(())
    }

    /// Phase 4: wait for every active peer's sync message. Phases are
    /// globally ordered, so all messages that will ever arrive for this
    /// epoch already have; a shortfall is immediately diagnosed as the
    /// full timeout having elapsed.
    pub fn phase_barrier(
        &mut self,
        epoch: u64,
        _params: &RunParams,
        queues: &QueueService,
    ) -> BarrierOutcome {
        let mut seen = BTreeSet::new();
        for msg in queues.receive(&sync_queue_name(self.rank()), usize::MAX) {
            if let Ok(sync) = serde_json::from_slice::<SyncMessage>(&msg.payload) {
                if sync.epoch == epoch {
                    seen.insert(sync.rank);
                }
            }
        }
        let missing: BTreeSet<usize> = self.active.difference(&seen).copied().collect();
        if missing.is_empty() {
            BarrierOutcome::Complete
        } else {
            for rank in &missing {
                self.events.push(format!("barrier_timeout:{rank}"));
            }
            BarrierOutcome::TimedOut(missing)
        }
    }

    /// Phase 5: fetch every reachable active peer's published gradient
    /// (own one included, in rank order) and aggregate robustly. The
    /// Byzantine bound is capped at `candidates − 1` so the rule always
    /// keeps at least one gradient.
    pub fn phase_aggregate(
        &mut self,
        epoch: u64,
        params: &RunParams,
        directory: &StoreDirectory,
    ) -> Result<(), SimError> {
        let mut candidates = Vec::new();
        for &rank in &self.active {
            let (store, password) = if rank == self.rank() {
                (&self.identity.store, self.password())
            } else {
                let peer = &self.identity.trusted[&rank];
                (
                    directory.resolve(&peer.record)?,
                    peer.store_password.as_str(),
                )
            };
            match store.get_tensor(password, &local_avg_key(epoch)) {
                Ok(g) => candidates.push(g),
                Err(SimError::Unreachable(_)) => {
                    self.events.push(format!("skipped_unreachable:{rank}"));
                }
                Err(SimError::NotFound(_)) => {
                    self.events.push(format!("skipped_missing:{rank}"));
                }
                Err(e) => return Err(e),
            }
        }
        if candidates.is_empty() {
            return Err(SimError::Core(CoreError::Empty));
        }
        let b_eff = params.rule.byzantine_bound.min(candidates.len() - 1);
        let rule = params.rule.clone().with_byzantine_bound(b_eff);
        let zeno_ctx = params.zeno.as_ref().map(|z| (&self.model, z));
        let aggregated = rule.apply(&candidates, zeno_ctx)?;
        self.identity
            .store
            .put_tensor(self.password(), &agg_key(epoch), aggregated.clone())?;
        self.aggregated = Some(aggregated);
        Ok(())
    }

    /// Phase 6: apply the aggregated gradient to the in-store model
    /// replica, mirror the arithmetic on the cached copy (bit-identical:
    /// same operation on the same floats), and measure.
    pub fn phase_update(
        &mut self,
        epoch: u64,
        params: &RunParams,
    ) -> Result<EpochMetrics, SimError> {
        self.identity.store.instore_model_update(
            self.password(),
            MODEL_KEY,
            &agg_key(epoch),
            params.learning_rate,
        )?;
        let aggregated = self
            .aggregated
            .take()
            .ok_or(SimError::NotFound("aggregated gradient".into()))?;
        let flat = self
            .model
            .to_flat()
            .minus_scaled(&aggregated, params.learning_rate)?;
        self.model = ModelParams::from_flat(&flat)?;
        Ok(EpochMetrics {
            train_loss: forward_loss(&self.model, &self.partition)?,
            val_accuracy: accuracy(&self.model, &params.validation)?,
        })
    }

    /// Phase 7: read every reachable active peer's inactive list for this
    /// epoch and confirm the failures all of them agree on. Returns the
    /// newly confirmed ranks.
    pub fn phase_consensus(
        &mut self,
        epoch: u64,
        directory: &StoreDirectory,
    ) -> Result<BTreeSet<usize>, SimError> {
        let mut lists = Vec::new();
        for &rank in &self.active {
            let (store, password) = if rank == self.rank() {
                (&self.identity.store, self.password())
            } else {
                let peer = &self.identity.trusted[&rank];
                (
                    directory.resolve(&peer.record)?,
                    peer.store_password.as_str(),
                )
            };
            match store.get_tensor(password, &inactive_key(epoch)) {
                Ok(v) => lists.push(decode_rank_set(&v)?),
                Err(SimError::Unreachable(_)) | Err(SimError::NotFound(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let agreed = consensus_inactive(&lists);
        let newly: BTreeSet<usize> = agreed
            .difference(&self.confirmed_inactive)
            .copied()
            .collect();
        for &rank in &newly {
            self.confirmed_inactive.insert(rank);
            self.active.remove(&rank);
            self.events.push(format!("confirmed_inactive:{rank}"));
        }
        Ok(newly)
    }

    /// Grows this peer's partition by a failed peer's slice and re-shards.
    pub fn absorb_rows(&mut self, extra: &LabeledBatch, batch_size: usize) -> Result<(), SimError> {
        self.partition = concat_batches(&self.partition, extra)?;
        self.shards = shard(&self.partition, batch_size)?;
        self.events.push(format!("absorbed_rows:{}", extra.rows()));
        Ok(())
    }

    /// Marks this peer crashed and takes its store down with it.
    pub fn crash(&mut self) {
        self.crashed = true;
        self.identity.store.set_crashed(true);
        self.events.clear();
    }
}

/// Serializes a rank set as a tensor: `[count, rank, rank, …]`. A tensor
/// because that is what stores hold; never empty because the count leads.
pub fn encode_rank_set(ranks: &BTreeSet<usize>) -> DenseVector {
    let mut values = Vec::with_capacity(ranks.len() + 1);
    values.push(ranks.len() as f64);
    values.extend(ranks.iter().map(|&r| r as f64));
    DenseVector::new(values).expect("rank-set encoding is finite and non-empty")
}

/// Parses a tensor produced by [`encode_rank_set`].
pub fn decode_rank_set(v: &DenseVector) -> Result<BTreeSet<usize>, SimError> {
    let values = v.as_slice();
    let count = values[0] as usize;
    if count as f64 != values[0] || values.len() != count + 1 {
        return Err(SimError::Crypto("malformed rank-set tensor"));
    }
    let mut set = BTreeSet::new();
    for &value in &values[1..] {
        if value as usize as f64 != value {
            return Err(SimError::Crypto("malformed rank-set tensor"));
        }
        set.insert(value as usize);
    }
    Ok(set)
}

/// The unanimity rule: a failure is network-confirmed exactly when every
/// collected list contains it. No lists → nothing is confirmed.
pub fn consensus_inactive(lists: &[BTreeSet<usize>]) -> BTreeSet<usize> {
    let Some((first, rest)) = lists.split_first() else {
        return BTreeSet::new();
    };
    let mut agreed = first.clone();
    for list in rest {
        agreed = agreed.intersection(list).copied().collect();
    }
    agreed
}

/// Splits a failed peer's partition into one contiguous slice per
/// survivor, assigned in ascending rank order; earlier survivors take the
/// remainder rows. Row conservation is exact.
pub fn redistribute_rows(
    failed: &LabeledBatch,
    survivors: usize,
) -> Result<Vec<LabeledBatch>, CoreError> {
    (0..survivors)
        .map(|i| partition_dataset(failed, survivors, i))
        .collect()
}

/// True when the loss has moved less than `tolerance` over the last
/// `interval` epochs. Divergence keeps the loss moving, so a blown-up run
/// never reads as converged.
pub fn convergence_check(loss_history: &[f64], interval: usize, tolerance: f64) -> bool {
    if interval == 0 || loss_history.len() < interval + 1 {
        return false;
    }
    let last = loss_history[loss_history.len() - 1];
    let prev = loss_history[loss_history.len() - 1 - interval];
    (prev - last).abs() < tolerance
}

/// What the lowest-ranked active peer announces to start the next epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EpochTrigger {
    pub epoch: u64,
    pub parallelism: usize,
    pub converged: bool,
}

pub fn trigger_next_epoch(current_epoch: u64, active_peers: usize, converged: bool) -> EpochTrigger {
    EpochTrigger {
        epoch: current_epoch + 1,
        parallelism: active_peers,
        converged,
    }
}
