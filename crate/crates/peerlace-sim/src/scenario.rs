//! Scenario files and the end-to-end simulation driver.
//!
//! A [`Scenario`] is the complete, replayable description of one
//! experiment: network size, data, training and aggregation parameters,
//! the attack, and the fault schedule. [`run_scenario`] executes it and
//! yields per-epoch CSV rows plus a machine-readable [`Summary`].
//!
//! Two execution modes produce byte-identical output: `det` runs every
//! phase peer-by-peer in rank order, `conc` runs each phase on real
//! threads (one per peer). They agree because phases are globally ordered,
//! every cross-peer read targets data written in an earlier phase, and
//! byte-ledger increments commute.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use peerlace_core::aggregation::{AggregationRule, RuleKind, ZenoConfig};
use peerlace_core::dataset::partition_dataset;
use peerlace_core::logistic::TrainingConfig;
use peerlace_core::{DenseVector, LabeledBatch, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::CryptoScheme;
use crate::data::{split_seed, train_validation_split, two_gaussian_batch};
use crate::fault::{AttackSpec, CrashTiming, FaultEvent};
use crate::identity::{init_network, join_network, InitPeerConfig, StoreDirectory};
use crate::queue::QueueService;
use crate::report::MetricsRow;
use crate::runtime::{
    convergence_check, redistribute_rows, trigger_next_epoch, HeartbeatConfig, PeerRuntime,
    RunParams, MODEL_KEY,
};
use crate::store::{ByteConvention, PeerStore, StoreAddress};
use crate::SimError;

/// Synthetic dataset parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub dim: usize,
    pub samples: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_separation() -> f64 {
    4.0
}

fn default_noise_sigma() -> f64 {
    1.0
}

fn default_validation_fraction() -> f64 {
    0.25
}

/// Training loop parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    #[serde(default = "default_convergence_interval")]
    pub convergence_interval: usize,
    #[serde(default = "default_convergence_tolerance")]
    pub convergence_tolerance: f64,
}

fn default_convergence_interval() -> usize {
    10
}

fn default_convergence_tolerance() -> f64 {
    1e-4
}

impl TrainingSpec {
    fn to_core(self, max_epochs: usize) -> TrainingConfig {
        let mut cfg = TrainingConfig::new(self.learning_rate, self.batch_size, max_epochs);
        cfg.convergence_interval = self.convergence_interval;
        cfg.convergence_tolerance = self.convergence_tolerance;
        cfg
    }
}

/// Aggregation rule selection by name, as written in scenario files and on
/// the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleName {
    Average,
    Marmed,
    Geomed,
    Meamed,
    Zeno,
}

impl RuleName {
    pub fn to_kind(self) -> RuleKind {
        match self {
            RuleName::Average => RuleKind::Average,
            RuleName::Marmed => RuleKind::MarMed,
            RuleName::Geomed => RuleKind::GeoMed,
            RuleName::Meamed => RuleKind::Meamed,
            RuleName::Zeno => RuleKind::Zeno,
        }
    }
}

impl std::str::FromStr for RuleName {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "average" => Ok(RuleName::Average),
            "marmed" => Ok(RuleName::Marmed),
            "geomed" => Ok(RuleName::Geomed),
            "meamed" => Ok(RuleName::Meamed),
            "zeno" => Ok(RuleName::Zeno),
            other => Err(SimError::Config(format!("unknown rule {other:?}"))),
        }
    }
}

/// Gradient-aggregation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    pub rule: RuleName,
    #[serde(default)]
    pub byzantine_bound: usize,
    #[serde(default = "default_zeno_rho")]
    pub zeno_rho: f64,
    #[serde(default = "default_geomed_tolerance")]
    pub geomed_tolerance: f64,
    #[serde(default = "default_geomed_max_iter")]
    pub geomed_max_iter: usize,
}

fn default_zeno_rho() -> f64 {
    1e-4
}

fn default_geomed_tolerance() -> f64 {
    1e-8
}

fn default_geomed_max_iter() -> usize {
    200
}

impl AggregationSpec {
    fn to_rule(self) -> AggregationRule {
        let mut rule = AggregationRule::new(self.rule.to_kind());
        rule.byzantine_bound = self.byzantine_bound;
        rule.geomed_tolerance = self.geomed_tolerance;
        rule.geomed_max_iter = self.geomed_max_iter;
        rule
    }
}

/// How peer phases are scheduled. Both modes yield byte-identical output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExecutionMode {
    #[default]
    #[serde(rename = "det")]
    Deterministic,
    #[serde(rename = "conc")]
    Concurrent,
}

impl std::str::FromStr for ExecutionMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "det" => Ok(ExecutionMode::Deterministic),
            "conc" => Ok(ExecutionMode::Concurrent),
            other => Err(SimError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn default_barrier_timeout() -> u64 {
    100
}

fn default_crypto() -> CryptoScheme {
    CryptoScheme::FakeDeterministic
}

/// A complete experiment description. Unknown fields are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n_peers: usize,
    pub dataset: DatasetSpec,
    pub training: TrainingSpec,
    pub aggregation: AggregationSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    #[serde(default = "default_barrier_timeout")]
    pub barrier_timeout_ticks: u64,
    #[serde(default)]
    pub byte_convention: ByteConvention,
    #[serde(default = "default_crypto")]
    pub crypto: CryptoScheme,
    pub seed: u64,
    #[serde(default)]
    pub mode: ExecutionMode,
    #[serde(default)]
    pub stop_on_convergence: bool,
}

impl Scenario {
    /// Loads and validates a scenario from a JSON file.
    pub fn from_path(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        let scenario: Scenario = serde_json::from_str(&text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn train_rows(&self) -> usize {
        let val = ((self.dataset.samples as f64) * self.dataset.validation_fraction).round()
            as usize;
        self.dataset.samples.saturating_sub(val)
    }

    /// Checks internal consistency, including a static walk of the fault
    /// schedule (membership must stay valid and at least one peer must
    /// survive).
    pub fn validate(&self) -> Result<(), SimError> {
        let cfg_err = |msg: String| Err(SimError::Config(msg));
        if self.name.is_empty() {
            return cfg_err("scenario name must not be empty".into());
        }
        if self.n_peers < 2 {
            return cfg_err(format!("n_peers is {}, need at least 2", self.n_peers));
        }
        let d = &self.dataset;
        if d.dim == 0 || d.samples < 4 {
            return cfg_err("dataset needs dim >= 1 and samples >= 4".into());
        }
        if !d.separation.is_finite() || !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) {
            return cfg_err("dataset separation/noise_sigma must be finite (noise >= 0)".into());
        }
        if !(d.validation_fraction > 0.0 && d.validation_fraction < 1.0) {
            return cfg_err("validation_fraction must lie strictly between 0 and 1".into());
        }
        self.training.to_core(self.training.max_epochs).validate()?;
        if self.aggregation.byzantine_bound >= self.n_peers {
            return cfg_err(format!(
                "byzantine_bound {} must be below n_peers {}",
                self.aggregation.byzantine_bound, self.n_peers
            ));
        }
        if !(self.aggregation.zeno_rho.is_finite() && self.aggregation.zeno_rho >= 0.0) {
            return cfg_err("zeno_rho must be finite and non-negative".into());
        }
        if self.heartbeat.trials == 0 || self.barrier_timeout_ticks == 0 {
            return cfg_err("heartbeat trials and barrier timeout must be positive".into());
        }
        match &self.attack {
            AttackSpec::None => {}
            AttackSpec::SignFlip {
                epsilon,
                malicious_ranks,
            } => {
                if !epsilon.is_finite() || *epsilon <= 0.0 {
                    return cfg_err("sign-flip epsilon must be finite and positive".into());
                }
                self.check_malicious_ranks(malicious_ranks)?;
            }
            AttackSpec::GaussianNoise {
                sigma,
                malicious_ranks,
            } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return cfg_err("noise sigma must be finite and non-negative".into());
                }
                self.check_malicious_ranks(malicious_ranks)?;
            }
        }
        self.validate_fault_schedule()
    }

    fn check_malicious_ranks(&self, ranks: &[usize]) -> Result<(), SimError> {
        let joined: BTreeSet<usize> = self
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultEvent::JoinPeer { rank, .. } => Some(*rank),
                _ => None,
            })
            .collect();
        for &r in ranks {
            if r >= self.n_peers && !joined.contains(&r) {
                return Err(SimError::Config(format!(
                    "malicious rank {r} never exists in this scenario"
                )));
            }
        }
        Ok(())
    }

    /// Replays the fault schedule against a membership model.
    fn validate_fault_schedule(&self) -> Result<(), SimError> {
        let mut present: BTreeSet<usize> = (0..self.n_peers).collect();
        // Ranks are never recycled: a member's trust record for a dead
        // peer would collide with the newcomer's.
        let mut ever_present = present.clone();
        // A peer joining in this window would miss the crash and block the
        // unanimous confirmation: it never probes a rank it never met.
        let undetected_crash_epochs: BTreeSet<u64> = self
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultEvent::CrashPeer {
                    at_epoch,
                    timing: CrashTiming::PostHeartbeat,
                    ..
                } => Some(*at_epoch),
                _ => None,
            })
            .collect();
        let mut ordered = self.faults.clone();
        ordered.sort_by_key(FaultEvent::at_epoch);
        let mut join_rows_total = 0usize;
        for f in &ordered {
            if f.at_epoch() as usize >= self.training.max_epochs {
                return Err(SimError::Config(format!(
                    "fault at epoch {} but the run has only {} epochs",
                    f.at_epoch(),
                    self.training.max_epochs
                )));
            }
            match f {
                FaultEvent::CrashPeer { rank, .. } => {
                    if !present.remove(rank) {
                        return Err(SimError::Config(format!(
                            "crash of rank {rank} which is not alive at epoch {}",
                            f.at_epoch()
                        )));
                    }
                    if present.is_empty() {
                        return Err(SimError::Config(
                            "fault schedule leaves no surviving peer".into(),
                        ));
                    }
                }
                FaultEvent::JoinPeer { rank, rows, .. } => {
                    if !ever_present.insert(*rank) {
                        return Err(SimError::RankCollision(*rank));
                    }
                    present.insert(*rank);
                    if *rows == 0 {
                        return Err(SimError::Config(format!(
                            "joining rank {rank} brings zero rows"
                        )));
                    }
                    if undetected_crash_epochs.contains(&f.at_epoch()) {
                        return Err(SimError::Config(format!(
                            "rank {rank} would join at epoch {} while a mid-epoch crash is still undetected; schedule the join one epoch later",
                            f.at_epoch()
                        )));
                    }
                    join_rows_total += rows;
                }
            }
        }
        let train = self.train_rows();
        if train < self.n_peers + join_rows_total {
            return Err(SimError::Config(format!(
                "training rows {train} cannot cover {} founders plus {join_rows_total} reserved join rows",
                self.n_peers
            )));
        }
        Ok(())
    }
}

/// Per-peer lifetime totals for the summary.
#[derive(Debug, Clone, Serialize)]
pub struct PeerTotals {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub rows: usize,
    pub shards: usize,
    pub crashed: bool,
}

/// Machine-readable outcome of a run.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub mode: ExecutionMode,
    pub epochs_run: u64,
    pub final_train_loss: f64,
    pub final_val_accuracy: f64,
    pub converged_at: Option<u64>,
    pub final_active: Vec<usize>,
    /// Failed rank → epoch at which the network confirmed the failure.
    pub confirmed_failures: BTreeMap<usize, u64>,
    /// Failed rank → epoch at which its data was redistributed.
    pub redistributions: BTreeMap<usize, u64>,
    /// Joined rank → epoch at whose end it entered the network.
    pub joins: BTreeMap<usize, u64>,
    /// Whether all live model replicas were bit-identical at every epoch.
    pub models_consistent: bool,
    pub per_peer: BTreeMap<usize, PeerTotals>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

/// Runs one phase over all live peers, sequentially in rank order or on
/// one thread per peer. Results come back keyed by rank in ascending
/// order either way.
fn run_phase<R, F>(
    runtimes: &mut [PeerRuntime],
    mode: ExecutionMode,
    f: F,
) -> Result<Vec<(usize, R)>, SimError>
where
    R: Send,
    F: Fn(&mut PeerRuntime) -> Result<R, SimError> + Sync,
{
    match mode {
        ExecutionMode::Deterministic => {
            let mut out = Vec::new();
            for rt in runtimes.iter_mut().filter(|rt| !rt.crashed) {
                let rank = rt.rank();
                out.push((rank, f(rt)?));
            }
            Ok(out)
        }
        ExecutionMode::Concurrent => {
            let results = std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for rt in runtimes.iter_mut().filter(|rt| !rt.crashed) {
                    let f = &f;
                    let rank = rt.rank();
                    handles.push((rank, scope.spawn(move || f(rt))));
                }
                handles
                    .into_iter()
                    .map(|(rank, h)| (rank, h.join().expect("phase thread panicked")))
                    .collect::<Vec<_>>()
            });
            results
                .into_iter()
                .map(|(rank, r)| r.map(|v| (rank, v)))
                .collect()
        }
    }
}

struct Driver {
    scenario: Scenario,
    seed: u64,
    params: RunParams,
    runtimes: Vec<PeerRuntime>,
    queues: QueueService,
    directory: StoreDirectory,
    /// Remaining training rows reserved for scheduled joins, consumed
    /// front-to-back in fault-schedule order.
    join_pool: Vec<LabeledBatch>,
    ledger_marks: BTreeMap<usize, (u64, u64)>,
    rows: Vec<MetricsRow>,
    loss_history: Vec<f64>,
    confirmed_failures: BTreeMap<usize, u64>,
    redistributions: BTreeMap<usize, u64>,
    joins: BTreeMap<usize, u64>,
    models_consistent: bool,
    converged_at: Option<u64>,
}

impl Driver {
    fn new(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        let mut data_rng = ChaCha20Rng::seed_from_u64(split_seed(seed, "data"));
        let full = two_gaussian_batch(
            scenario.dataset.dim,
            scenario.dataset.samples,
            scenario.dataset.separation,
            scenario.dataset.noise_sigma,
            &mut data_rng,
        )?;
        let (train, validation) =
            train_validation_split(&full, scenario.dataset.validation_fraction)?;

        // Slice the reserved join rows off the tail, in schedule order, so
        // the founders train on a contiguous prefix.
        let mut join_events: Vec<(usize, usize)> = scenario
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultEvent::JoinPeer { rank, rows, .. } => Some((*rank, *rows)),
                _ => None,
            })
            .collect();
        let reserved: usize = join_events.iter().map(|(_, rows)| rows).sum();
        let founders_train = train.slice_rows(0, train.rows() - reserved);
        let mut join_pool = Vec::new();
        let mut cursor = train.rows() - reserved;
        join_events.sort_by_key(|&(rank, _)| rank);
        for &(_, rows) in &join_events {
            join_pool.push(train.slice_rows(cursor, cursor + rows));
            cursor += rows;
        }

        let queues = QueueService::new();
        let mut directory = StoreDirectory::new();
        let configs: Vec<InitPeerConfig> =
            (0..scenario.n_peers).map(InitPeerConfig::honest).collect();
        let outcome = init_network(
            &configs,
            scenario.crypto,
            scenario.byte_convention,
            &queues,
            &mut directory,
            seed,
        )?;

        let rule = scenario.aggregation.to_rule();
        let zeno = (rule.kind == RuleKind::Zeno).then(|| {
            let mut z = ZenoConfig::new(scenario.training.learning_rate, validation.clone());
            z.rho = scenario.aggregation.zeno_rho;
            z
        });
        let params = RunParams {
            learning_rate: scenario.training.learning_rate,
            batch_size: scenario.training.batch_size,
            heartbeat: scenario.heartbeat,
            barrier_timeout_ticks: scenario.barrier_timeout_ticks,
            rule,
            zeno,
            validation,
        };

        let model = ModelParams::zeros(scenario.dataset.dim);
        let active: BTreeSet<usize> = (0..scenario.n_peers).collect();
        let mut runtimes = Vec::new();
        for identity in outcome.peers {
            let rank = identity.rank;
            let partition = partition_dataset(&founders_train, scenario.n_peers, rank)?;
            identity
                .store
                .put_tensor(&identity.store_password, MODEL_KEY, model.to_flat())?;
            runtimes.push(PeerRuntime::new(
                identity,
                partition,
                scenario.training.batch_size,
                active.clone(),
                model.clone(),
                scenario.attack.clone(),
                split_seed(seed, &format!("attack:{rank}")),
            )?);
        }
        let ledger_marks = runtimes
            .iter()
            .map(|rt| {
                let l = rt.identity.store.ledger_report();
                (rt.rank(), (l.bytes_in, l.bytes_out))
            })
            .collect();

        Ok(Self {
            scenario: scenario.clone(),
            seed,
            params,
            runtimes,
            queues,
            directory,
            join_pool,
            ledger_marks,
            rows: Vec::new(),
            loss_history: Vec::new(),
            confirmed_failures: BTreeMap::new(),
            redistributions: BTreeMap::new(),
            joins: BTreeMap::new(),
            models_consistent: true,
            converged_at: None,
        })
    }

    fn find_runtime(&mut self, rank: usize) -> Option<&mut PeerRuntime> {
        self.runtimes.iter_mut().find(|rt| rt.rank() == rank)
    }

    fn inject_crashes(&mut self, epoch: u64, timing: CrashTiming) {
        let due: Vec<usize> = self
            .scenario
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultEvent::CrashPeer {
                    rank,
                    at_epoch,
                    timing: t,
                } if *at_epoch == epoch && *t == timing => Some(*rank),
                _ => None,
            })
            .collect();
        for rank in due {
            if let Some(rt) = self.find_runtime(rank) {
                if !rt.crashed {
                    rt.crash();
                }
            }
        }
    }

    /// Runs one epoch end to end; returns false when the run should stop.
    fn run_epoch(&mut self, epoch: u64) -> Result<bool, SimError> {
        let mode = self.scenario.mode;
        self.inject_crashes(epoch, CrashTiming::EpochStart);
        {
            let params = &self.params;
            let directory = &self.directory;
            let queues = &self.queues;
            run_phase(&mut self.runtimes, mode, |rt| {
                rt.phase_heartbeat(epoch, params, directory, queues)
            })?;
        }
        self.inject_crashes(epoch, CrashTiming::PostHeartbeat);

        let params = &self.params;
        let directory = &self.directory;
        let queues = &self.queues;
        run_phase(&mut self.runtimes, mode, |rt| rt.phase_compute(epoch, params))?;
        run_phase(&mut self.runtimes, mode, |rt| {
            rt.phase_share(epoch, params, queues)
        })?;
        run_phase(&mut self.runtimes, mode, |rt| {
            Ok(rt.phase_barrier(epoch, params, queues))
        })?;
        run_phase(&mut self.runtimes, mode, |rt| {
            rt.phase_aggregate(epoch, params, directory)
        })?;
        let metrics = run_phase(&mut self.runtimes, mode, |rt| rt.phase_update(epoch, params))?;
        let confirmed = run_phase(&mut self.runtimes, mode, |rt| {
            rt.phase_consensus(epoch, directory)
        })?;

        // Redistribute the data of every failure the network just
        // confirmed, ascending, each failed slice split over the current
        // survivors in rank order.
        let mut newly_confirmed: BTreeSet<usize> = BTreeSet::new();
        for (_, set) in &confirmed {
            newly_confirmed.extend(set.iter().copied());
        }
        for &failed_rank in &newly_confirmed {
            self.confirmed_failures.entry(failed_rank).or_insert(epoch);
            let failed_partition = match self.find_runtime(failed_rank) {
                Some(rt) => rt.partition.slice_rows(0, rt.partition.rows()),
                None => continue,
            };
            let survivor_ranks: Vec<usize> = self
                .runtimes
                .iter()
                .filter(|rt| !rt.crashed)
                .map(|rt| rt.rank())
                .collect();
            let slices = redistribute_rows(&failed_partition, survivor_ranks.len())?;
            let batch_size = self.params.batch_size;
            for (rank, slice) in survivor_ranks.into_iter().zip(&slices) {
                self.find_runtime(rank)
                    .expect("survivor runtime exists")
                    .absorb_rows(slice, batch_size)?;
            }
            self.redistributions.insert(failed_rank, epoch);
        }

        // Replica consistency across all live stores, checked out-of-band.
        let mut reference: Option<DenseVector> = None;
        let mut diverged: Vec<usize> = Vec::new();
        for rt in self.runtimes.iter().filter(|rt| !rt.crashed) {
            let replica = rt
                .identity
                .store
                .inspect_tensor(MODEL_KEY)
                .ok_or_else(|| SimError::NotFound("model replica".into()))?;
            match &reference {
                None => reference = Some(replica),
                Some(model) if *model == replica => {}
                Some(_) => diverged.push(rt.rank()),
            }
        }
        if !diverged.is_empty() {
            self.models_consistent = false;
            for rank in diverged {
                self.find_runtime(rank)
                    .expect("live runtime exists")
                    .events
                    .push("model_divergence".into());
            }
        }

        // Emit one row per peer that completed the epoch.
        let metric_by_rank: BTreeMap<usize, _> = metrics.into_iter().collect();
        let mut losses = Vec::new();
        for rt in self.runtimes.iter_mut().filter(|rt| !rt.crashed) {
            let rank = rt.rank();
            let Some(m) = metric_by_rank.get(&rank) else {
                continue;
            };
            let ledger = rt.identity.store.ledger_report();
            let mark = self.ledger_marks.entry(rank).or_insert((0, 0));
            let row = MetricsRow {
                epoch,
                peer: rank,
                active_count: rt.active.len(),
                train_loss: m.train_loss,
                val_accuracy: m.val_accuracy,
                bytes_in: ledger.bytes_in - mark.0,
                bytes_out: ledger.bytes_out - mark.1,
                event: rt.drain_events().join(";"),
            };
            *mark = (ledger.bytes_in, ledger.bytes_out);
            losses.push(m.train_loss);
            self.rows.push(row);
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        self.loss_history.push(mean_loss);

        // Scheduled joins take effect at the end of the epoch, so the
        // grown active count first shows up in the next epoch's rows.
        self.process_joins(epoch)?;

        let converged = convergence_check(
            &self.loss_history,
            self.scenario.training.convergence_interval,
            self.scenario.training.convergence_tolerance,
        );
        if converged && self.converged_at.is_none() {
            self.converged_at = Some(epoch);
        }
        let live = self.runtimes.iter().filter(|rt| !rt.crashed).count();
        let trigger = trigger_next_epoch(epoch, live, converged);
        Ok(!(self.scenario.stop_on_convergence && trigger.converged))
    }

    fn process_joins(&mut self, epoch: u64) -> Result<(), SimError> {
        let mut due: Vec<(usize, usize, usize)> = self
            .scenario
            .faults
            .iter()
            .filter_map(|f| match f {
                FaultEvent::JoinPeer {
                    rank,
                    at_epoch,
                    rows,
                } if *at_epoch == epoch => Some((*rank, *rows)),
                _ => None,
            })
            .map(|(rank, rows)| {
                // The pool was carved in ascending-rank order.
                let join_ranks: Vec<usize> = self
                    .scenario
                    .faults
                    .iter()
                    .filter_map(|f| match f {
                        FaultEvent::JoinPeer { rank, .. } => Some(*rank),
                        _ => None,
                    })
                    .collect();
                let mut sorted = join_ranks.clone();
                sorted.sort_unstable();
                let pool_index = sorted.iter().position(|&r| r == rank).expect("join rank");
                (rank, rows, pool_index)
            })
            .collect();
        due.sort_unstable();

        for (rank, _rows, pool_index) in due {
            let mut members: Vec<&mut _> = self
                .runtimes
                .iter_mut()
                .filter(|rt| !rt.crashed)
                .map(|rt| &mut rt.identity)
                .collect();
            let identity = join_network(
                rank,
                self.scenario.crypto,
                self.scenario.byte_convention,
                false,
                &mut members,
                &self.queues,
                &mut self.directory,
                self.seed,
            )?;

            // Download the current model from the lowest-ranked member the
            // newcomer trusts, then seed the own replica with it.
            let (_, mentor) = identity
                .trusted
                .iter()
                .next()
                .ok_or_else(|| SimError::NotFound("mentor peer".into()))?;
            let mentor_store = self.directory.resolve(&mentor.record)?;
            let flat = mentor_store.get_tensor(&mentor.store_password, MODEL_KEY)?;
            identity
                .store
                .put_tensor(&identity.store_password, MODEL_KEY, flat.clone())?;
            let model = ModelParams::from_flat(&flat)?;

            // The newcomer learns membership from the network, not from
            // the experimenter: it adopts a member's active set.
            let mut active = self
                .runtimes
                .iter()
                .find(|rt| !rt.crashed)
                .map(|rt| rt.active.clone())
                .unwrap_or_default();
            active.insert(rank);
            for rt in self.runtimes.iter_mut().filter(|rt| !rt.crashed) {
                rt.active.insert(rank);
                rt.events.push(format!("peer_joined:{rank}"));
            }

            let partition = self.join_pool[pool_index].slice_rows(
                0,
                self.join_pool[pool_index].rows(),
            );
            let mut runtime = PeerRuntime::new(
                identity,
                partition,
                self.scenario.training.batch_size,
                active,
                model,
                self.scenario.attack.clone(),
                split_seed(self.seed, &format!("attack:{rank}")),
            )?;
            runtime.events.push("joined".into());
            let ledger = runtime.identity.store.ledger_report();
            self.ledger_marks
                .insert(rank, (ledger.bytes_in, ledger.bytes_out));
            let pos = self
                .runtimes
                .partition_point(|rt| rt.rank() < rank);
            self.runtimes.insert(pos, runtime);
            self.joins.insert(rank, epoch);
        }
        Ok(())
    }

    fn into_output(mut self, epochs_run: u64) -> RunOutput {
        let live: Vec<&PeerRuntime> = self.runtimes.iter().filter(|rt| !rt.crashed).collect();
        let last_epoch_rows: Vec<&MetricsRow> = self
            .rows
            .iter()
            .filter(|r| r.epoch + 1 == epochs_run)
            .collect();
        let final_train_loss = *self.loss_history.last().unwrap_or(&f64::NAN);
        let final_val_accuracy = last_epoch_rows
            .first()
            .map(|r| r.val_accuracy)
            .unwrap_or(f64::NAN);
        let final_active: Vec<usize> = live.iter().map(|rt| rt.rank()).collect();
        let per_peer = self
            .runtimes
            .iter()
            .map(|rt| {
                let l = rt.identity.store.ledger_report();
                (
                    rt.rank(),
                    PeerTotals {
                        bytes_in: l.bytes_in,
                        bytes_out: l.bytes_out,
                        rows: rt.partition.rows(),
                        shards: rt.shards.len(),
                        crashed: rt.crashed,
                    },
                )
            })
            .collect();
        let summary = Summary {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            mode: self.scenario.mode,
            epochs_run,
            final_train_loss,
            final_val_accuracy,
            converged_at: self.converged_at,
            final_active,
            confirmed_failures: std::mem::take(&mut self.confirmed_failures),
            redistributions: std::mem::take(&mut self.redistributions),
            joins: std::mem::take(&mut self.joins),
            models_consistent: self.models_consistent,
            per_peer,
        };
        RunOutput {
            rows: self.rows,
            summary,
        }
    }
}

/// Executes a scenario. `seed_override` replaces the scenario's own seed
/// (the CLI wires `--seed` and the environment override through here).
pub fn run_scenario(scenario: &Scenario, seed_override: Option<u64>) -> Result<RunOutput, SimError> {
    scenario.validate()?;
    let seed = seed_override.unwrap_or(scenario.seed);
    let mut driver = Driver::new(scenario, seed)?;
    let mut epochs_run = 0;
    for epoch in 0..scenario.training.max_epochs as u64 {
        let keep_going = driver.run_epoch(epoch)?;
        epochs_run = epoch + 1;
        if !keep_going {
            break;
        }
    }
    Ok(driver.into_output(epochs_run))
}

/// Byte cost and output equality of the two store paths, measured over
/// `trials` randomized repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct StoreComparison {
    pub model_len: usize,
    pub n_grads: usize,
    pub trials: usize,
    /// Bytes the fetch-process-restore path moved for averaging plus the
    /// model update, one trial.
    pub external_bytes: u64,
    /// Bytes the in-store path moved for the same two operations.
    pub instore_bytes: u64,
    pub reduction_percent_average: f64,
    pub reduction_percent_update: f64,
    /// Whether both paths produced bit-identical averages and models in
    /// every trial.
    pub outputs_identical: bool,
}

/// Runs the same averaging + model update through the external and the
/// in-store path on two fresh stores and compares bytes and bits.
pub fn compare_store_paths(
    model_len: usize,
    n_grads: usize,
    trials: usize,
    seed: u64,
) -> Result<StoreComparison, SimError> {
    if model_len == 0 || n_grads == 0 || trials == 0 {
        return Err(SimError::Config(
            "compare-store needs positive model length, gradient count, and trials".into(),
        ));
    }
    let convention = ByteConvention::default();
    let mut outputs_identical = true;
    let mut external_bytes = 0;
    let mut instore_bytes = 0;
    let mut reduction_avg = 0.0;
    let mut reduction_upd = 0.0;

    for trial in 0..trials {
        let mut rng = ChaCha20Rng::seed_from_u64(split_seed(seed, &format!("trial:{trial}")));
        let external = PeerStore::new(StoreAddress::new("external", 1), "pw", convention);
        let instore = PeerStore::new(StoreAddress::new("instore", 1), "pw", convention);

        let model = DenseVector::new((0..model_len).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("finite non-empty");
        let grads: Vec<DenseVector> = (0..n_grads)
            .map(|_| {
                DenseVector::new((0..model_len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .expect("finite non-empty")
            })
            .collect();
        let keys: Vec<String> = (0..n_grads).map(|i| format!("g{i}")).collect();
        for store in [&external, &instore] {
            store.put_tensor("pw", "model", model.clone())?;
            for (k, g) in keys.iter().zip(&grads) {
                store.put_tensor("pw", k, g.clone())?;
            }
        }

        external.external_average("pw", &keys, "avg")?;
        external.external_model_update("pw", "model", "avg", 0.1)?;
        instore.instore_average("pw", &keys, "avg")?;
        instore.instore_model_update("pw", "model", "avg", 0.1)?;

        outputs_identical &= external.inspect_tensor("avg") == instore.inspect_tensor("avg");
        outputs_identical &= external.inspect_tensor("model") == instore.inspect_tensor("model");

        if trial == 0 {
            let ext = external.ledger_report();
            let ins = instore.ledger_report();
            let cost = |ledger: &crate::store::TransferLedger, op: &str| {
                ledger
                    .per_op
                    .get(op)
                    .map(|c| c.bytes_in + c.bytes_out)
                    .unwrap_or(0)
            };
            let ext_avg = cost(&ext, "external_average");
            let ext_upd = cost(&ext, "external_model_update");
            let ins_avg = cost(&ins, "instore_average");
            let ins_upd = cost(&ins, "instore_model_update");
            external_bytes = ext_avg + ext_upd;
            instore_bytes = ins_avg + ins_upd;
            reduction_avg = 100.0 * (1.0 - ins_avg as f64 / ext_avg as f64);
            reduction_upd = 100.0 * (1.0 - ins_upd as f64 / ext_upd as f64);
        }
    }

    Ok(StoreComparison {
        model_len,
        n_grads,
        trials,
        external_bytes,
        instore_bytes,
        reduction_percent_average: reduction_avg,
        reduction_percent_update: reduction_upd,
        outputs_identical,
    })
}

/// One cell of the scaling study.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n_peers: usize,
    pub batch_size: usize,
    pub shards_per_peer: usize,
    pub total_shards: usize,
    pub bytes_per_peer_epoch: u64,
    pub total_bytes: u64,
    pub final_train_loss: f64,
}

/// Runs a short clean scenario for every (peer count, batch size) pair and
/// reports shard layout and byte traffic. The dataset is sized so every
/// requested peer count divides the training rows evenly.
pub fn scaling_study(
    peer_counts: &[usize],
    batch_sizes: &[usize],
    seed: u64,
) -> Result<Vec<ScalingRow>, SimError> {
    if peer_counts.is_empty() || batch_sizes.is_empty() {
        return Err(SimError::Config(
            "scaling study needs at least one peer count and one batch size".into(),
        ));
    }
    let mut rows = Vec::new();
    for &n_peers in peer_counts {
        for &batch_size in batch_sizes {
            let scenario = Scenario {
                name: format!("scaling-{n_peers}p-{batch_size}b"),
                n_peers,
                dataset: DatasetSpec {
                    dim: 8,
                    samples: 1920,
                    separation: 4.0,
                    noise_sigma: 1.0,
                    validation_fraction: 0.2,
                },
                training: TrainingSpec {
                    learning_rate: 0.3,
                    batch_size,
                    max_epochs: 5,
                    convergence_interval: default_convergence_interval(),
                    convergence_tolerance: default_convergence_tolerance(),
                },
                aggregation: AggregationSpec {
                    rule: RuleName::Average,
                    byzantine_bound: 0,
                    zeno_rho: default_zeno_rho(),
                    geomed_tolerance: default_geomed_tolerance(),
                    geomed_max_iter: default_geomed_max_iter(),
                },
                attack: AttackSpec::None,
                faults: Vec::new(),
                heartbeat: HeartbeatConfig::default(),
                barrier_timeout_ticks: default_barrier_timeout(),
                byte_convention: ByteConvention::default(),
                crypto: CryptoScheme::FakeDeterministic,
                seed,
                mode: ExecutionMode::Deterministic,
                stop_on_convergence: false,
            };
            let output = run_scenario(&scenario, None)?;
            let shards_per_peer = output.summary.per_peer[&0].shards;
            let total_shards: usize = output.summary.per_peer.values().map(|p| p.shards).sum();
            let total_bytes: u64 = output
                .summary
                .per_peer
                .values()
                .map(|p| p.bytes_in + p.bytes_out)
                .sum();
            let epochs = output.summary.epochs_run.max(1);
            rows.push(ScalingRow {
                n_peers,
                batch_size,
                shards_per_peer,
                total_shards,
                bytes_per_peer_epoch: total_bytes / (n_peers as u64 * epochs),
                total_bytes,
                final_train_loss: output.summary.final_train_loss,
            });
        }
    }
    Ok(rows)
}

/// Attack families offered by the attack study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyAttack {
    None,
    SignFlip,
    Noise,
}

impl std::str::FromStr for StudyAttack {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(StudyAttack::None),
            "signflip" => Ok(StudyAttack::SignFlip),
            "noise" => Ok(StudyAttack::Noise),
            other => Err(SimError::Config(format!("unknown attack {other:?}"))),
        }
    }
}

/// The canonical attack-resilience experiment: four peers, one of them
/// malicious, 2000 samples in eight dimensions, 200 epochs.
pub fn build_attack_scenario(rule: RuleName, attack: StudyAttack) -> Scenario {
    let attack_spec = match attack {
        StudyAttack::None => AttackSpec::None,
        StudyAttack::SignFlip => AttackSpec::SignFlip {
            epsilon: 10.0,
            malicious_ranks: vec![3],
        },
        StudyAttack::Noise => AttackSpec::GaussianNoise {
            sigma: 1.0,
            malicious_ranks: vec![3],
        },
    };
    let attack_name = match attack {
        StudyAttack::None => "clean",
        StudyAttack::SignFlip => "signflip",
        StudyAttack::Noise => "noise",
    };
    Scenario {
        name: format!("attack-study-{:?}-{attack_name}", rule).to_lowercase(),
        n_peers: 4,
        dataset: DatasetSpec {
            dim: 8,
            samples: 2000,
            separation: 4.0,
            noise_sigma: 1.0,
            validation_fraction: 0.25,
        },
        training: TrainingSpec {
            learning_rate: 0.3,
            batch_size: 25,
            max_epochs: 200,
            convergence_interval: default_convergence_interval(),
            convergence_tolerance: default_convergence_tolerance(),
        },
        aggregation: AggregationSpec {
            rule,
            byzantine_bound: 1,
            zeno_rho: default_zeno_rho(),
            geomed_tolerance: default_geomed_tolerance(),
            geomed_max_iter: default_geomed_max_iter(),
        },
        attack: attack_spec,
        faults: Vec::new(),
        heartbeat: HeartbeatConfig::default(),
        barrier_timeout_ticks: default_barrier_timeout(),
        byte_convention: ByteConvention::default(),
        crypto: CryptoScheme::FakeDeterministic,
        seed: 0xA77AC4,
        mode: ExecutionMode::Deterministic,
        stop_on_convergence: false,
    }
}
