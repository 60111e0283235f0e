//! Round-based experiment driver.
//!
//! One round trains one batch on every pair and ends with the leader trying
//! to commit the round's ledgers. Attacks are injected at epoch boundaries,
//! and every epoch closes with a testing pass over the test shards using
//! frozen parameters.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Attacker, Roster};
use crate::checkpoint;
use crate::consensus::{Cluster, CommitOutcome, ElectionReason, Event, EventLog, TermConfig};
use crate::data::{self, BatchPlan, Dataset, Shard, SyntheticSpec};
use crate::ledger::Chain;
use crate::node::NodeId;
use crate::numerics::{AdamHyper, FlopCounter, FlopTally};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::split::{self, BatchTag, PairState};
use crate::vib::{self, ReparamMode, StepConfig, VibDims};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Encoders on devices, decoders on servers, ledgers under consensus.
    #[default]
    Bvib,
    /// The whole model on one host; no consensus.
    VibMonolithic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Gaussian blobs generated from the run seed.
    Synthetic {
        spec: SyntheticSpec,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// The four standard MNIST IDX files, optionally truncated.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiRecording {
    /// MI bounds of the last test batch of each pair.
    #[default]
    LastBatch,
    AllBatches,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSchedule {
    #[default]
    EveryEpoch,
    FinalOnly,
}

/// Stops training once the moving average of the training objective settles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    /// Relative change between consecutive moving averages.
    pub tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            window: 10,
            tolerance: 1e-4,
        }
    }
}

impl EarlyStop {
    /// True once the moving average of the per-epoch objective stops moving.
    pub fn converged(&self, history: &[f64]) -> bool {
        if history.len() <= self.window {
            return false;
        }
        let n = history.len();
        let now = mean(&history[n - self.window..]);
        let before = mean(&history[n - self.window - 1..n - 1]);
        (now - before).abs() <= self.tolerance * before.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub epochs: u64,
    /// Batches per epoch on every shard.
    pub batches: usize,
    /// Fixed batch size; by default each shard is cut into `batches` equal
    /// batches with the remainder dropped.
    pub batch_size: Option<usize>,
    pub pairs: usize,
    pub lr: f64,
    pub beta: f64,
    pub latent_dim: usize,
    pub trunk_dim: usize,
    pub decoder_hidden: usize,
    pub reparam: ReparamMode,
    pub dataset: DatasetSource,
    pub attack: AttackConfig,
    pub term: TermConfig,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub mi_recording: MiRecording,
    pub test_schedule: TestSchedule,
    /// Re-runs of an aborted batch before it is skipped.
    pub max_batch_retries: u32,
    /// Restart training from scratch when a batch exhausts its retries.
    pub restart_on_abort: bool,
    pub max_full_restarts: u32,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Bvib,
            epochs: 300,
            batches: 200,
            batch_size: None,
            pairs: 10,
            lr: 1e-3,
            beta: 1e-3,
            latent_dim: 512,
            trunk_dim: 1024,
            decoder_hidden: 784,
            reparam: ReparamMode::StdDev,
            dataset: DatasetSource::Mnist {
                dir: PathBuf::from("data/mnist"),
                train_limit: None,
                test_limit: None,
            },
            attack: AttackConfig::none(),
            term: TermConfig::default(),
            seed: 0,
            early_stop: Some(EarlyStop::default()),
            mi_recording: MiRecording::LastBatch,
            test_schedule: TestSchedule::EveryEpoch,
            max_batch_retries: 2,
            restart_on_abort: false,
            max_full_restarts: 3,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Small synthetic setup that trains in well under a second per epoch.
    pub fn quick_synthetic() -> Self {
        Self {
            epochs: 5,
            batches: 10,
            pairs: 1,
            latent_dim: 8,
            trunk_dim: 32,
            decoder_hidden: 32,
            dataset: DatasetSource::Synthetic {
                spec: SyntheticSpec::default(),
                train_per_class: 20,
                test_per_class: 10,
            },
            early_stop: None,
            ..Self::default()
        }
    }

    /// Devices plus servers the attackers can see.
    pub fn total_nodes(&self) -> usize {
        2 * self.pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batches == 0 || self.pairs == 0 {
            return Err(Error::config("epochs, batches and pairs must be positive"));
        }
        if self.latent_dim == 0 || self.trunk_dim == 0 || self.decoder_hidden == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if let Some(es) = self.early_stop {
            if es.window == 0 || !(es.tolerance >= 0.0) {
                return Err(Error::config(
                    "early stop window must be positive and tolerance non-negative",
                ));
            }
        }
        self.attack.validate(self.total_nodes())?;
        self.term.validate()
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            beta: self.beta,
            mode: self.reparam,
            adam: AdamHyper::with_lr(self.lr),
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Synthetic {
                spec,
                train_per_class,
                test_per_class,
            } => data::make_synthetic_pair(spec, *train_per_class, *test_per_class, self.seed),
            DatasetSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let (train, test) = data::load_mnist_dir(dir)?;
                let train = match train_limit {
                    Some(n) => train.truncated(*n),
                    None => train,
                };
                let test = match test_limit {
                    Some(n) => test.truncated(*n),
                    None => test,
                };
                Ok((train, test))
            }
        }
    }
}

/// Per-epoch metrics; one row of metrics.csv.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mi_upper_bits: f64,
    /// Includes the `log2(classes)` offset.
    pub mi_lower_bits: f64,
    /// NaN when no test pass ran this epoch.
    pub accuracy_pct: f64,
    pub elections: usize,
    pub aborts: usize,
    pub paralyzed_devices: usize,
    pub paralyzed_servers: usize,
    /// Mean training objective over the batches that trained.
    pub train_loss: f64,
    pub trained_batches: usize,
}

pub const METRICS_HEADER: &str =
    "epoch,mi_upper_bits,mi_lower_bits,accuracy_pct,elections,aborts,paralyzed_devices,paralyzed_servers";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mi_upper_bits,
            self.mi_lower_bits,
            self.accuracy_pct,
            self.elections,
            self.aborts,
            self.paralyzed_devices,
            self.paralyzed_servers
        )
    }
}

/// Device-side versus server-side multiply-accumulate totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopReport {
    pub device: FlopTally,
    pub server: FlopTally,
    pub total: u64,
    pub device_share_pct: f64,
    pub server_share_pct: f64,
    /// Encoder share of forward MACs from the layer sizes alone.
    pub analytic_device_share_pct: f64,
    /// Same ratio with a single encoder head instead of separate mean and
    /// log-variance heads.
    pub single_head_device_share_pct: f64,
}

/// Splits counted MACs into user-side (devices and the monolithic host)
/// and server-side totals.
pub fn flop_report(counter: &FlopCounter, dims: &VibDims) -> FlopReport {
    let device = counter.total_where(|n| n.is_user_side());
    let server = counter.total_where(|n| n.is_server());
    let total = device.total() + server.total();
    let pct = |part: u64| {
        if total == 0 {
            0.0
        } else {
            100.0 * part as f64 / total as f64
        }
    };
    FlopReport {
        device,
        server,
        total,
        device_share_pct: pct(device.total()),
        server_share_pct: pct(server.total()),
        analytic_device_share_pct: 100.0 * dims.device_share(),
        single_head_device_share_pct: 100.0 * dims.single_head_device_share(),
    }
}

/// Test accuracy in percent: one minus the mean per-batch mismatch rate.
///
/// A `None` prediction (the sample's node was paralyzed) counts as a
/// mismatch.
pub fn compute_accuracy(predictions: &[Vec<Option<usize>>], labels: &[Vec<u8>]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::config(
            "accuracy needs one prediction batch per label batch",
        ));
    }
    let mut mismatch = 0.0;
    for (p, y) in predictions.iter().zip(labels) {
        if p.is_empty() || p.len() != y.len() {
            return Err(Error::config("empty or misaligned prediction batch"));
        }
        let wrong = p
            .iter()
            .zip(y)
            .filter(|(p, &y)| **p != Some(y as usize))
            .count();
        mismatch += wrong as f64 / p.len() as f64;
    }
    Ok((1.0 - mismatch / predictions.len() as f64) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub epochs: Vec<EpochMetrics>,
    /// Mean over epochs that ran a test pass.
    pub average_accuracy_pct: f64,
    pub final_accuracy_pct: f64,
    pub flops: FlopReport,
    pub test_flops: FlopReport,
    pub chain_height: usize,
    pub rounds: u64,
    pub elections: usize,
    pub aborts: usize,
    pub skipped_batches: usize,
    pub restarts: u32,
    pub stopped_early: bool,
    pub failed: bool,
    pub failure: Option<String>,
}

impl MetricsReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

/// What one round achieved.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome {
    /// No alive leader; the batch waits for the next round.
    Stalled,
    /// The monolithic host is paralyzed; the batch is lost.
    HostParalyzed,
    Trained {
        losses: Vec<f64>,
        committed_height: Option<usize>,
    },
    /// Quorum missed; parameters were rolled back to the start of the round.
    Aborted { received: usize, quorum: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochEnd {
    Completed,
    /// An abort exhausted its retries and training restarted from scratch.
    Restarted,
}

struct TestPass {
    accuracy_pct: f64,
    mi_upper_bits: f64,
    mi_lower_bits: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Full simulation state; advance it with [`Simulation::run_epoch`] or drive
/// single rounds for scripted scenarios.
pub struct Simulation {
    cfg: ExperimentConfig,
    dims: VibDims,
    step: StepConfig,
    train: Dataset,
    test: Dataset,
    test_shards: Vec<Shard>,
    train_plan: BatchPlan,
    test_plan: BatchPlan,
    models: Vec<PairState>,
    shuffles: Vec<SimRng>,
    orders: Vec<Vec<usize>>,
    test_noise: Vec<SimRng>,
    cluster: Option<Cluster>,
    host_events: EventLog,
    election_rng: SimRng,
    attacker: Attacker,
    attack_rng: SimRng,
    attacked: BTreeSet<NodeId>,
    scripted: BTreeSet<NodeId>,
    paralyzed: BTreeSet<NodeId>,
    round: u64,
    epoch: u64,
    train_flops: FlopCounter,
    test_flops: FlopCounter,
    metrics: Vec<EpochMetrics>,
    loss_history: Vec<f64>,
    skipped_batches: usize,
    restarts: u32,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = cfg.load_data()?;
        Self::with_data(cfg, train, test)
    }

    pub fn with_data(cfg: ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.dim() != test.dim() {
            return Err(Error::config("train and test images differ in dimension"));
        }
        let dims = VibDims {
            input: train.dim(),
            trunk: cfg.trunk_dim,
            latent: cfg.latent_dim,
            decoder_hidden: cfg.decoder_hidden,
            classes: data::NUM_CLASSES,
        };
        dims.validate()?;
        let train_shards = data::shard(train.len(), cfg.pairs, cfg.seed)?;
        let test_shards = data::shard(test.len(), cfg.pairs, cfg.seed)?;
        let min_len = |s: &[Shard]| s.iter().map(Shard::len).min().unwrap_or(0);
        let train_plan = BatchPlan::new(min_len(&train_shards), cfg.batches, cfg.batch_size)?;
        let test_plan = BatchPlan::new(min_len(&test_shards), cfg.batches, None)?;
        let mut election_rng = stream_rng(cfg.seed, Stream::Election);
        let cluster = match cfg.mode {
            Mode::Bvib => {
                let mut c = Cluster::new(cfg.pairs, cfg.term)?;
                c.bootstrap(&mut election_rng, 0)?;
                Some(c)
            }
            Mode::VibMonolithic => None,
        };
        let mut sim = Self {
            step: cfg.step_config(),
            dims,
            models: Vec::new(),
            shuffles: (0..cfg.pairs)
                .map(|p| stream_rng(cfg.seed, Stream::Shuffle(p)))
                .collect(),
            orders: train_shards.iter().map(|s| s.indices.clone()).collect(),
            test_noise: (0..cfg.pairs)
                .map(|p| stream_rng(cfg.seed, Stream::TestNoise(p)))
                .collect(),
            train,
            test,
            test_shards,
            train_plan,
            test_plan,
            cluster,
            host_events: EventLog::default(),
            election_rng,
            attacker: Attacker::new(cfg.attack),
            attack_rng: stream_rng(cfg.seed, Stream::Attack),
            attacked: BTreeSet::new(),
            scripted: BTreeSet::new(),
            paralyzed: BTreeSet::new(),
            round: 0,
            epoch: 0,
            train_flops: FlopCounter::default(),
            test_flops: FlopCounter::default(),
            metrics: Vec::new(),
            loss_history: Vec::new(),
            skipped_batches: 0,
            restarts: 0,
            cfg,
        };
        sim.init_models()?;
        Ok(sim)
    }

    fn init_models(&mut self) -> Result<()> {
        let count = match self.cfg.mode {
            Mode::Bvib => self.cfg.pairs,
            Mode::VibMonolithic => 1,
        };
        self.models = (0..count)
            .map(|p| PairState::init(p, &self.dims, self.cfg.seed))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dims(&self) -> &VibDims {
        &self.dims
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cluster(&self) -> Option<&Cluster> {
        self.cluster.as_ref()
    }

    pub fn cluster_mut(&mut self) -> Option<&mut Cluster> {
        self.cluster.as_mut()
    }

    pub fn models(&self) -> &[PairState] {
        &self.models
    }

    pub fn train_plan(&self) -> BatchPlan {
        self.train_plan
    }

    pub fn paralyzed(&self) -> &BTreeSet<NodeId> {
        &self.paralyzed
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn train_flops(&self) -> &FlopCounter {
        &self.train_flops
    }

    pub fn events(&self) -> &EventLog {
        self.cluster
            .as_ref()
            .map_or(&self.host_events, Cluster::events)
    }

    fn events_mut(&mut self) -> &mut EventLog {
        match self.cluster.as_mut() {
            Some(c) => c.events_mut(),
            None => &mut self.host_events,
        }
    }

    /// Chain of the current leader; empty in monolithic mode.
    pub fn chain(&self) -> Chain {
        self.cluster
            .as_ref()
            .map(|c| c.canonical_chain().clone())
            .unwrap_or_default()
    }

    fn roster(&self) -> Roster {
        match self.cfg.mode {
            Mode::Bvib => Roster::bvib(
                self.cfg.pairs,
                self.cluster.as_ref().and_then(Cluster::leader),
            ),
            Mode::VibMonolithic => Roster::single_host(),
        }
    }

    fn check_node(&self, node: NodeId) -> Result<()> {
        let ok = match (self.cfg.mode, node) {
            (Mode::Bvib, NodeId::Device(i) | NodeId::Server(i)) => i < self.cfg.pairs,
            (Mode::VibMonolithic, NodeId::Host) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{node} is not part of this deployment"
            )))
        }
    }

    /// Scripted paralysis that persists until [`Simulation::restore`],
    /// independent of the attackers.
    pub fn paralyze(&mut self, node: NodeId) -> Result<()> {
        self.check_node(node)?;
        self.scripted.insert(node);
        self.apply_paralysis();
        Ok(())
    }

    pub fn restore(&mut self, node: NodeId) -> Result<()> {
        self.check_node(node)?;
        self.scripted.remove(&node);
        self.apply_paralysis();
        Ok(())
    }

    fn apply_paralysis(&mut self) {
        let next: BTreeSet<NodeId> = self.attacked.union(&self.scripted).copied().collect();
        let (round, epoch) = (self.round, self.epoch);
        let restored: Vec<NodeId> = self.paralyzed.difference(&next).copied().collect();
        let hit: Vec<NodeId> = next.difference(&self.paralyzed).copied().collect();
        for node in restored {
            if let (Some(c), NodeId::Server(i)) = (self.cluster.as_mut(), node) {
                c.set_alive(i, true);
            }
            self.events_mut()
                .push(Event::Restore { round, epoch, node });
        }
        for node in hit {
            if let (Some(c), NodeId::Server(i)) = (self.cluster.as_mut(), node) {
                c.set_alive(i, false);
            }
            self.events_mut()
                .push(Event::Paralyze { round, epoch, node });
        }
        self.paralyzed = next;
    }

    fn is_alive(&self, node: NodeId) -> bool {
        !self.paralyzed.contains(&node)
    }

    /// Attack injection and reshuffle of every training shard.
    pub fn begin_epoch(&mut self) {
        let roster = self.roster();
        self.attacked = self
            .attacker
            .inject(self.epoch, &mut self.attack_rng, &roster);
        self.apply_paralysis();
        for (order, rng) in self.orders.iter_mut().zip(&mut self.shuffles) {
            order.shuffle(rng);
        }
    }

    fn train_pair(
        &mut self,
        model: usize,
        shard: usize,
        tag: BatchTag,
        entries: &mut Vec<crate::ledger::LedgerEntry>,
    ) -> Result<Option<f64>> {
        let (device, server) = match self.cfg.mode {
            Mode::Bvib => (NodeId::Device(model), NodeId::Server(model)),
            Mode::VibMonolithic => (NodeId::Host, NodeId::Host),
        };
        let idx = self
            .train_plan
            .batch(&self.orders[shard], tag.batch as usize);
        let (x, labels) = self.train.gather(&idx);
        let (device_alive, server_alive) = (self.is_alive(device), self.is_alive(server));
        let pair = &mut self.models[model];
        let Some(msg) = split::device_forward(
            pair,
            x,
            labels,
            tag,
            device_alive,
            self.train_flops.tally_mut(device),
        )?
        else {
            return Ok(None);
        };
        let stepped = split::server_step(
            pair,
            &msg,
            &self.step,
            server_alive,
            self.round,
            entries,
            self.train_flops.tally_mut(server),
        )?;
        let Some((breakdown, reply)) = stepped else {
            pair.device.discard_pending();
            return Ok(None);
        };
        split::device_backward(pair, &reply, &self.step, self.train_flops.tally_mut(device))?;
        Ok(Some(breakdown.loss))
    }

    /// Runs one round on batch `batch` of the current epoch.
    pub fn run_round(&mut self, batch: usize) -> Result<RoundOutcome> {
        if batch >= self.train_plan.batches {
            return Err(Error::config(format!(
                "batch {batch} out of range 0..{}",
                self.train_plan.batches
            )));
        }
        self.round += 1;
        let round = self.round;
        let tag = BatchTag {
            epoch: self.epoch,
            batch: batch as u64,
        };

        if self.cfg.mode == Mode::VibMonolithic {
            if !self.is_alive(NodeId::Host) {
                return Ok(RoundOutcome::HostParalyzed);
            }
            let mut losses = Vec::with_capacity(self.cfg.pairs);
            let mut scratch = Vec::new();
            for shard in 0..self.cfg.pairs {
                losses.extend(self.train_pair(0, shard, tag, &mut scratch)?);
            }
            return Ok(RoundOutcome::Trained {
                losses,
                committed_height: None,
            });
        }

        let cluster = self.cluster.as_mut().expect("bvib mode has a cluster");
        cluster.heartbeat_tick(round, &mut self.election_rng)?;
        cluster.check_term(round, &mut self.election_rng)?;
        let Some(leader) = cluster.alive_leader() else {
            return Ok(RoundOutcome::Stalled);
        };
        let followers = cluster
            .nodes()
            .iter()
            .filter(|n| n.alive && n.node_id != leader)
            .count();
        // Paralysis is fixed within a round, so a missed quorum is known
        // before training; only then is a rollback copy needed.
        let snapshot = (followers < cluster.quorum()).then(|| self.models.clone());

        let mut losses = Vec::with_capacity(self.cfg.pairs);
        for p in 0..self.cfg.pairs {
            let mut entries = Vec::new();
            if let Some(loss) = self.train_pair(p, p, tag, &mut entries)? {
                losses.push(loss);
            }
            let cluster = self.cluster.as_mut().expect("bvib mode has a cluster");
            for e in entries {
                cluster.record_entry(p, e);
            }
        }

        let cluster = self.cluster.as_mut().expect("bvib mode has a cluster");
        match cluster.collect_and_commit(round)? {
            CommitOutcome::Aborted { received, quorum } => {
                if let Some(models) = snapshot {
                    self.models = models;
                }
                for m in &mut self.models {
                    m.device.discard_pending();
                }
                cluster.start_election(
                    &mut self.election_rng,
                    round,
                    ElectionReason::QuorumAbort,
                )?;
                Ok(RoundOutcome::Aborted { received, quorum })
            }
            CommitOutcome::Committed { height, .. } => Ok(RoundOutcome::Trained {
                losses,
                committed_height: Some(height),
            }),
            CommitOutcome::NothingToCommit => Ok(RoundOutcome::Trained {
                losses,
                committed_height: None,
            }),
            CommitOutcome::LeaderUnavailable => Ok(RoundOutcome::Stalled),
        }
    }

    /// Re-initializes every model and rewinds to epoch 0. The chain and the
    /// event log are kept.
    fn restart_from_scratch(&mut self) -> Result<()> {
        self.restarts += 1;
        let (round, epoch) = (self.round, self.epoch);
        self.events_mut().push(Event::Restart { round, epoch });
        self.init_models()?;
        self.metrics.clear();
        self.loss_history.clear();
        self.epoch = 0;
        Ok(())
    }

    fn count_events(&self, from: usize) -> (usize, usize) {
        let new = &self.events().events()[from..];
        let elections = new
            .iter()
            .filter(|e| matches!(e, Event::Election { .. }))
            .count();
        let aborts = new
            .iter()
            .filter(|e| matches!(e, Event::Abort { .. }))
            .count();
        (elections, aborts)
    }

    /// Runs a full epoch: attack injection, B batches, then testing.
    pub fn run_epoch(&mut self) -> Result<EpochEnd> {
        let events_before = self.events().events().len();
        self.begin_epoch();
        let mut losses = Vec::new();
        let mut trained_batches = 0;
        let mut batch = 0;
        let mut retries = 0;
        while batch < self.train_plan.batches {
            match self.run_round(batch)? {
                RoundOutcome::Stalled => {}
                RoundOutcome::HostParalyzed => batch += 1,
                RoundOutcome::Trained { losses: l, .. } => {
                    trained_batches += usize::from(!l.is_empty());
                    losses.extend(l);
                    batch += 1;
                    retries = 0;
                }
                RoundOutcome::Aborted { .. } => {
                    retries += 1;
                    if retries > self.cfg.max_batch_retries {
                        if self.cfg.restart_on_abort && self.restarts < self.cfg.max_full_restarts {
                            self.restart_from_scratch()?;
                            return Ok(EpochEnd::Restarted);
                        }
                        let (round, epoch) = (self.round, self.epoch);
                        self.events_mut().push(Event::BatchSkipped {
                            round,
                            epoch,
                            batch: batch as u64,
                        });
                        self.skipped_batches += 1;
                        batch += 1;
                        retries = 0;
                    }
                }
            }
        }

        let is_last = self.epoch + 1 >= self.cfg.epochs;
        let test = match self.cfg.test_schedule {
            TestSchedule::EveryEpoch => Some(self.test_pass()?),
            TestSchedule::FinalOnly if is_last => Some(self.test_pass()?),
            TestSchedule::FinalOnly => None,
        };
        let (elections, aborts) = self.count_events(events_before);
        let train_loss = mean(&losses);
        if train_loss.is_finite() {
            self.loss_history.push(train_loss);
        }
        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            mi_upper_bits: test.as_ref().map_or(f64::NAN, |t| t.mi_upper_bits),
            mi_lower_bits: test.as_ref().map_or(f64::NAN, |t| t.mi_lower_bits),
            accuracy_pct: test.as_ref().map_or(f64::NAN, |t| t.accuracy_pct),
            elections,
            aborts,
            paralyzed_devices: self.paralyzed.iter().filter(|n| n.is_user_side()).count(),
            paralyzed_servers: self.paralyzed.iter().filter(|n| n.is_server()).count(),
            train_loss,
            trained_batches,
        });
        self.epoch += 1;
        Ok(EpochEnd::Completed)
    }

    /// Evaluates every test shard with frozen parameters. Shards whose device
    /// or server is paralyzed produce no predictions.
    fn test_pass(&mut self) -> Result<TestPass> {
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        let (mut uppers, mut lowers) = (Vec::new(), Vec::new());
        for shard in 0..self.cfg.pairs {
            let (model, device, server) = match self.cfg.mode {
                Mode::Bvib => (shard, NodeId::Device(shard), NodeId::Server(shard)),
                Mode::VibMonolithic => (0, NodeId::Host, NodeId::Host),
            };
            let alive = self.is_alive(device) && self.is_alive(server);
            let (mut up, mut low) = (Vec::new(), Vec::new());
            for b in 0..self.test_plan.batches {
                let idx = self.test_plan.batch(&self.test_shards[shard].indices, b);
                let (x, y) = self.test.gather(&idx);
                if !alive {
                    predictions.push(vec![None; y.len()]);
                    labels.push(y);
                    continue;
                }
                let pair = &self.models[model];
                let (stats, _) =
                    vib::encode(&pair.device.encoder, &x, self.test_flops.tally_mut(device))?;
                let eps = vib::sample_noise(
                    &mut self.test_noise[shard],
                    stats.batch_size(),
                    stats.latent_dim(),
                );
                let eval = vib::evaluate_latent(
                    &pair.server.decoder,
                    &stats,
                    &eps,
                    &y,
                    &self.step,
                    self.test_flops.tally_mut(server),
                )?;
                up.push(eval.breakdown.mi_upper_bits);
                low.push(eval.breakdown.reported_mi_lower_bits(self.dims.classes));
                predictions.push(eval.predictions.into_iter().map(Some).collect());
                labels.push(y);
            }
            if alive {
                match self.cfg.mi_recording {
                    MiRecording::LastBatch => {
                        uppers.extend(up.last());
                        lowers.extend(low.last());
                    }
                    MiRecording::AllBatches => {
                        uppers.push(mean(&up));
                        lowers.push(mean(&low));
                    }
                }
            }
        }
        Ok(TestPass {
            accuracy_pct: compute_accuracy(&predictions, &labels)?,
            mi_upper_bits: mean(&uppers),
            mi_lower_bits: mean(&lowers),
        })
    }

    /// Runs the remaining epochs. Losing every server ends the run with a
    /// report flagged as failed; numeric failures are returned as errors.
    pub fn run(&mut self) -> Result<MetricsReport> {
        let mut stopped_early = false;
        let mut failure = None;
        while self.epoch < self.cfg.epochs {
            match self.run_epoch() {
                Ok(_) => {}
                Err(Error::TotalFailure) => {
                    failure = Some(format!(
                        "all servers paralyzed in epoch {} at round {}",
                        self.epoch, self.round
                    ));
                    break;
                }
                Err(e) => return Err(e),
            }
            if self.epoch < self.cfg.epochs
                && self
                    .cfg
                    .early_stop
                    .is_some_and(|es| es.converged(&self.loss_history))
            {
                stopped_early = true;
                break;
            }
        }
        Ok(self.report(stopped_early, failure))
    }

    pub fn report(&self, stopped_early: bool, failure: Option<String>) -> MetricsReport {
        let accs: Vec<f64> = self
            .metrics
            .iter()
            .map(|m| m.accuracy_pct)
            .filter(|a| a.is_finite())
            .collect();
        let events = self.events().events();
        MetricsReport {
            mode: self.cfg.mode,
            epochs: self.metrics.clone(),
            average_accuracy_pct: mean(&accs),
            final_accuracy_pct: accs.last().copied().unwrap_or(f64::NAN),
            flops: flop_report(&self.train_flops, &self.dims),
            test_flops: flop_report(&self.test_flops, &self.dims),
            chain_height: self.chain().height(),
            rounds: self.round,
            elections: events
                .iter()
                .filter(|e| matches!(e, Event::Election { .. }))
                .count(),
            aborts: events
                .iter()
                .filter(|e| matches!(e, Event::Abort { .. }))
                .count(),
            skipped_batches: self.skipped_batches,
            restarts: self.restarts,
            stopped_early,
            failed: failure.is_some(),
            failure,
        }
    }

    /// Writes metrics.csv, run_summary.json, chain.jsonl, events.log and one
    /// checkpoint per model into `dir`.
    pub fn write_outputs(&self, report: &MetricsReport, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
        let summary = serde_json::json!({ "config": &self.cfg, "report": report });
        let mut out = BufWriter::new(File::create(dir.join("run_summary.json"))?);
        serde_json::to_writer_pretty(&mut out, &summary)?;
        out.write_all(b"\n")?;
        out.flush()?;
        let mut chain = BufWriter::new(File::create(dir.join("chain.jsonl"))?);
        self.chain().export(&mut chain)?;
        chain.flush()?;
        self.events()
            .write_to(BufWriter::new(File::create(dir.join("events.log"))?))?;
        for (i, m) in self.models.iter().enumerate() {
            checkpoint::save(&m.params(), dir.join(format!("model-{i}.ckpt")))?;
        }
        Ok(())
    }
}

/// Runs a complete experiment and writes its outputs when `out_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let mut sim = Simulation::new(cfg.clone())?;
    let report = sim.run()?;
    if let Some(dir) = &cfg.out_dir {
        sim.write_outputs(&report, dir)?;
    }
    Ok(report)
}
