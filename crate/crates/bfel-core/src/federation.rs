//! End-to-end scenario runner: synchronous federated rounds driven through
//! the event simulator, with PoV consensus and ledgers in BFEL mode or a
//! central aggregator in the FEL baselines.
//!
//! Three topologies are runnable: `fel` (dense uploads, central aggregator),
//! `fel-gcs` (compressed uploads, central aggregator), and `bfel-gcs`
//! (compressed uploads, miner committee, subchains anchored to a main chain,
//! plus a model trade at the end). One run is a pure function of
//! `(config, train, test)`.
//!
//! Timing model: worker↔infrastructure messages pay `base_latency + size/bw`;
//! miner-to-miner traffic is backbone traffic that contributes bytes but no
//! critical-path time, with the whole consensus phase charged as one flat
//! `consensus_delay_ms` per round. FEL rounds are identical minus that term.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::adversary::{poison_gradient, AttackConfig, FaultDirective, FaultScript, PoisonMode};
use crate::codec::Writer;
use crate::compress::{aggregate_sparse, clip_gradient, CompressionConfig, CompressorState, SparseGradient};
use crate::consensus::{
    assemble_and_commit, cross_verify, elect_delegates, evaluate_update_with_baseline,
    CommitDecision, Committee, LocalUpdate, MinerState, QualityPolicy, SlashReason, SlashRecord,
    VerifierResponse,
};
use crate::data::{BatchSampler, Dataset};
use crate::error::{CoreError, CoreResult};
use crate::ledger::{
    anchor_to_main, anchor_to_main_capped, anchored_up_to, record_trade, ChainKind, SubchainState,
    TradeRecord,
};
use crate::model::{evaluate_accuracy, gradient, sgd_step, GradientVector, ModelParameters, ModelSpec};
use crate::netsim::{CostModel, EventQueue, SimEvent, TraceRecord};
use crate::rng::{derive_key, derive_rng};
use crate::sign::{Authority, EntityId, Role};

/// Which of the three comparison topologies to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Central aggregator, dense gradient uploads.
    Fel,
    /// Central aggregator, compressed uploads.
    FelGcs,
    /// Miner committee with PoV consensus, compressed uploads.
    BfelGcs,
}

impl Scenario {
    pub fn parse(s: &str) -> CoreResult<Self> {
        match s {
            "fel" => Ok(Scenario::Fel),
            "fel-gcs" => Ok(Scenario::FelGcs),
            "bfel-gcs" => Ok(Scenario::BfelGcs),
            other => Err(CoreError::InvalidConfig(format!("unknown scenario: {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Fel => "fel",
            Scenario::FelGcs => "fel-gcs",
            Scenario::BfelGcs => "bfel-gcs",
        }
    }

    pub fn uses_compression(&self) -> bool {
        !matches!(self, Scenario::Fel)
    }

    pub fn uses_consensus(&self) -> bool {
        matches!(self, Scenario::BfelGcs)
    }
}

/// Reference model architecture choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        match *self {
            ModelKind::Logistic => ModelSpec::Logistic { input_dim, classes },
            ModelKind::Mlp { hidden } => ModelSpec::Mlp { input_dim, hidden, classes },
        }
    }
}

/// Complete description of one experiment run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    /// Workers per training subchain.
    pub workers: usize,
    /// Miner committee size per training subchain.
    pub miners: usize,
    /// Task publishers; one training subchain each.
    pub publishers: usize,
    pub min_deposit: u64,
    /// Anchor every this many subchain blocks.
    pub anchor_period: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global federation rounds (the training epochs E).
    pub rounds: usize,
    pub model: ModelKind,
    /// Scale on the seeded weight init; zero starts from a uniform
    /// -prediction model (common for the logistic head).
    pub init_scale: f64,
    /// Publisher-side full-batch SGD steps on its verification set before
    /// round 1; the result is the initial global model workers receive.
    pub warmup_rounds: usize,
    /// Cap on per-round metrics accuracy evaluation (the final summary
    /// number always uses the full test set).
    pub metrics_eval_samples: usize,
    pub compression: CompressionConfig,
    /// Quality gate: max allowed accuracy drop.
    pub theta: f64,
    /// Size of the publisher-supplied verification set.
    pub verify_samples: usize,
    pub cost: CostModel,
    pub attack: AttackConfig,
    pub fault_script: FaultScript,
    pub trading_enabled: bool,
    pub trade_price: u64,
}

impl Default for RunConfig {
    /// Defaults mirror the reference evaluation setup where stated: η=0.001,
    /// B=128, E=1000, θ=0.05, ρ=0.3, m=0.9, clip 1.0, 10 workers and 11
    /// miners per training subchain, 2 publishers, 0.5 s consensus delay.
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: Scenario::BfelGcs,
            workers: 10,
            miners: 11,
            publishers: 2,
            min_deposit: 10,
            anchor_period: 5,
            learning_rate: 0.001,
            batch_size: 128,
            rounds: 1000,
            model: ModelKind::Mlp { hidden: 64 },
            init_scale: 1.0,
            warmup_rounds: 0,
            metrics_eval_samples: 512,
            compression: CompressionConfig { rho_percent: 0.3, momentum: 0.9, clip_norm: Some(1.0) },
            theta: 0.05,
            verify_samples: 256,
            cost: CostModel::default(),
            attack: AttackConfig::default(),
            fault_script: FaultScript::new(),
            trading_enabled: true,
            trade_price: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, train_len: usize) -> CoreResult<()> {
        if self.workers == 0 || self.rounds == 0 || self.publishers == 0 {
            return Err(CoreError::InvalidConfig(
                "workers, rounds, and publishers must be positive".to_string(),
            ));
        }
        if self.scenario.uses_consensus() && self.miners < 2 {
            return Err(CoreError::InvalidConfig(
                "consensus needs at least a leader and one verifier".to_string(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidConfig("learning rate must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be at least 1".to_string()));
        }
        let shard_len = train_len / self.workers.max(1);
        if self.batch_size > shard_len.max(1) {
            return Err(CoreError::InvalidConfig(format!(
                "batch size {} exceeds per-worker shard size {shard_len}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(CoreError::InvalidConfig("theta must be in [0, 1]".to_string()));
        }
        if self.verify_samples == 0 || self.metrics_eval_samples == 0 {
            return Err(CoreError::InvalidConfig("evaluation sample caps must be positive".to_string()));
        }
        if self.anchor_period == 0 {
            return Err(CoreError::InvalidConfig("anchor period must be positive".to_string()));
        }
        self.compression.validate()?;
        self.cost.validate()?;
        self.attack.validate()?;
        Ok(())
    }
}

/// One row of the per-round metrics export.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub global_test_accuracy: f64,
    pub bytes_this_round: u64,
    pub cumulative_bytes: u64,
    pub compression_ratio: f64,
    pub exposure_ratio: f64,
    pub qualified_count: u32,
    pub slashed_count: u32,
    pub simulated_time_ms: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "round,global_test_accuracy,bytes_this_round,cumulative_bytes,compression_ratio,exposure_ratio,qualified_count,slashed_count,simulated_time_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.global_test_accuracy,
            self.bytes_this_round,
            self.cumulative_bytes,
            self.compression_ratio,
            self.exposure_ratio,
            self.qualified_count,
            self.slashed_count,
            self.simulated_time_ms
        )
    }
}

/// Everything a run produces; the CLI writes these to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Per-round metrics for the first publisher's task.
    pub metrics: Vec<MetricsRow>,
    /// Merged message trace across all publishers, time-ordered.
    pub trace: Vec<TraceRecord>,
    pub training_chains: Vec<SubchainState>,
    pub trading_chain: Option<SubchainState>,
    pub main_chain: Option<SubchainState>,
    /// Final global model per publisher.
    pub final_models: Vec<ModelParameters>,
    /// Publisher 0's final accuracy on the full test set.
    pub final_accuracy: f64,
    pub total_bytes: u64,
    pub total_time_ms: u64,
    /// Human-readable protocol notes (discarded updates, slashes, failures).
    pub log: Vec<String>,
}

/// The initial global model a publisher distributes: seeded init plus the
/// configured warmup steps on the publisher's verification set (clipped like
/// worker gradients so the warm start stays at update scale).
pub fn initial_global_model(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    publisher: usize,
) -> CoreResult<ModelParameters> {
    let spec = cfg.model.spec(train.feature_dim(), train.num_classes() as usize);
    let model_seed = derive_seed(cfg.seed, "model-init", &[publisher as u64]);
    let mut model = ModelParameters::init_scaled(spec, model_seed, cfg.init_scale)?;
    if cfg.warmup_rounds > 0 {
        let policy_set = seeded_subset(test, cfg.verify_samples, cfg.seed, "policy-test", publisher)?;
        for _ in 0..cfg.warmup_rounds {
            let mut g = gradient(spec, &model, &policy_set.all())?;
            if let Some(c) = cfg.compression.clip_norm {
                g = clip_gradient(&g, c)?;
            }
            model = sgd_step(&model, &g, cfg.learning_rate)?;
        }
    }
    Ok(model)
}

/// Sub-seed helper shared by the runner and by replay oracles.
pub fn derive_seed(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let key = derive_key(seed, label, parts);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}

/// Batch-sampler stream id for a worker, shared with replay oracles.
pub fn worker_stream(publisher: usize, worker: usize) -> u64 {
    (publisher as u64) * 1024 + worker as u64
}

pub fn publisher_id(p: usize) -> EntityId {
    EntityId::new(format!("pub{p}"))
}

pub fn worker_id(p: usize, w: usize) -> EntityId {
    EntityId::new(format!("p{p}-w{w:02}"))
}

pub fn miner_id(p: usize, m: usize) -> EntityId {
    EntityId::new(format!("p{p}-m{m:02}"))
}

pub fn aggregator_id(p: usize) -> EntityId {
    EntityId::new(format!("p{p}-agg"))
}

pub fn training_chain_id(p: usize) -> String {
    format!("training-{p}")
}

// Message type tags used in traces; byte encodings carry a leading tag byte.
pub const MSG_LOCAL_UPDATE: &str = "local-update";
pub const MSG_DENSE_UPDATE: &str = "dense-update";
pub const MSG_UPDATE_FORWARD: &str = "update-forward";
pub const MSG_VERDICT: &str = "verdict";
pub const MSG_RESPONSE: &str = "response";
pub const MSG_PENDING_BLOCK: &str = "pending-block";
pub const MSG_BLOCK_VOTE: &str = "block-vote";
pub const MSG_COMMIT_SYNC: &str = "commit-sync";
pub const MSG_GLOBAL_UPDATE: &str = "global-update";
pub const MSG_ROUND_FAILED: &str = "round-failed";
pub const MSG_ANCHOR: &str = "anchor";
pub const MSG_TRADE: &str = "trade";

/// Canonical message length: one tag byte plus the body encoding.
fn msg_len(body_len: usize) -> u64 {
    1 + body_len as u64
}

/// Sparse update set broadcast to workers each round (the slice of block
/// data they download).
fn update_set_body(round: u32, updates: &[LocalUpdate]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(round);
    w.u32(updates.len() as u32);
    for u in updates {
        u.encode_into(&mut w);
    }
    w.finish()
}

/// Dense (uncompressed) update body for the plain FEL baseline.
fn dense_update_body(worker: &EntityId, round: u32, values: &[f64]) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(worker.as_str());
    w.u32(round);
    w.u32(values.len() as u32);
    for v in values {
        w.f64(*v);
    }
    w.finish()
}

fn dense_set_body(round: u32, updates: &[(EntityId, Vec<f64>)]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(round);
    w.u32(updates.len() as u32);
    for (id, values) in updates {
        w.raw(&dense_update_body(id, round, values));
    }
    w.finish()
}

fn verdict_body(verifier: &EntityId, round: u32, qualified: &BTreeSet<EntityId>) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(verifier.as_str());
    w.u32(round);
    w.u32(qualified.len() as u32);
    for id in qualified {
        w.str(id.as_str());
    }
    w.finish()
}

fn block_vote_body(verifier: &EntityId, round: u32, approve: bool) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(verifier.as_str());
    w.u32(round);
    w.u8(u8::from(approve));
    w.finish()
}

fn round_failed_body(round: u32) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(round);
    w.finish()
}

fn seeded_subset(data: &Dataset, cap: usize, seed: u64, label: &str, publisher: usize) -> CoreResult<Dataset> {
    if cap >= data.len() {
        return Ok(data.clone());
    }
    let mut order: Vec<u32> = (0..data.len() as u32).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut derive_rng(seed, label, &[publisher as u64]));
    order.truncate(cap);
    data.subset(&order)
}

fn apply_mean_sparse(global: &ModelParameters, sparse: &[SparseGradient], eta: f64) -> CoreResult<ModelParameters> {
    if sparse.is_empty() {
        return Ok(global.clone());
    }
    let sum = aggregate_sparse(sparse, global.dim() as u32)?;
    let scale = 1.0 / sparse.len() as f64;
    let mean = GradientVector::new(sum.values().iter().map(|v| v * scale).collect())?;
    sgd_step(global, &mean, eta)
}

fn apply_mean_dense(global: &ModelParameters, updates: &[(EntityId, Vec<f64>)], eta: f64) -> CoreResult<ModelParameters> {
    if updates.is_empty() {
        return Ok(global.clone());
    }
    let dim = global.dim();
    let mut mean = alloc::vec![0.0f64; dim];
    for (_, values) in updates {
        if values.len() != dim {
            return Err(CoreError::DimensionMismatch { expected: dim, got: values.len() });
        }
        for (m, v) in mean.iter_mut().zip(values) {
            *m += v;
        }
    }
    let scale = 1.0 / updates.len() as f64;
    for m in &mut mean {
        *m *= scale;
    }
    sgd_step(global, &GradientVector::new(mean)?, eta)
}

/// Sparse and dense updates produced by one round's upload phase.
type UploadedUpdates = (Vec<LocalUpdate>, Vec<(EntityId, Vec<f64>)>);

struct WorkerNode {
    id: EntityId,
    shard: Dataset,
    sampler: BatchSampler,
    compressor: CompressorState,
    poisoned: bool,
}

/// Deferred cross-chain write, applied in timestamp order after all
/// (conceptually parallel) publisher instances finish.
struct AnchorRequest {
    timestamp_ms: u64,
    publisher: usize,
    /// Subchain height when the anchor was requested.
    up_to_height: u64,
}

struct TradeRequest {
    timestamp_ms: u64,
    publisher: usize,
    model_digest: [u8; 32],
}

/// Result of one publisher's full training run.
struct TaskOutcome {
    metrics: Vec<MetricsRow>,
    trace: Vec<TraceRecord>,
    chain: Option<SubchainState>,
    final_model: ModelParameters,
    log: Vec<String>,
    anchors: Vec<AnchorRequest>,
    trade: Option<TradeRequest>,
    time_ms: u64,
}

struct TaskRunner<'a> {
    cfg: &'a RunConfig,
    publisher: usize,
    authority: &'a Authority,
    spec: ModelSpec,
    global: ModelParameters,
    workers: Vec<WorkerNode>,
    committee: Option<Committee>,
    chain: Option<SubchainState>,
    policy: QualityPolicy,
    metrics_eval: Dataset,
    queue: EventQueue<&'static str>,
    jitter_rng: rand_chacha::ChaCha12Rng,
    entries_sent: u64,
    pending_slashes: Vec<SlashRecord>,
    slashed_total: u32,
    anchored_height: u64,
    anchors: Vec<AnchorRequest>,
    log: Vec<String>,
    metrics: Vec<MetricsRow>,
    stop_after_commits: Option<u32>,
    commits: u32,
}

impl<'a> TaskRunner<'a> {
    fn new(
        cfg: &'a RunConfig,
        publisher: usize,
        authority: &'a Authority,
        train: &Dataset,
        test: &Dataset,
        stop_after_commits: Option<u32>,
    ) -> CoreResult<Self> {
        let spec = cfg.model.spec(train.feature_dim(), train.num_classes() as usize);
        let global = initial_global_model(cfg, train, test, publisher)?;

        // Publisher-supplied verification set and the metrics evaluation
        // subset: seeded samples of the test split.
        let policy_set = seeded_subset(test, cfg.verify_samples, cfg.seed, "policy-test", publisher)?;
        let metrics_eval = seeded_subset(test, cfg.metrics_eval_samples, cfg.seed, "metrics-eval", publisher)?;

        // IID worker shards.
        let shard_seed = derive_seed(cfg.seed, "shard-split", &[publisher as u64]);
        let shards = train.split_shards(cfg.workers, shard_seed)?;

        let poisoned = AttackConfig::select_nodes(
            cfg.attack.poison_fraction,
            cfg.workers,
            derive_seed(cfg.seed, "poisoned-workers", &[publisher as u64]),
            "poisoned-workers",
        );

        let mut workers = Vec::with_capacity(cfg.workers);
        for (w, shard) in shards.into_iter().enumerate() {
            let is_poisoned = poisoned.contains(&w);
            let shard = if is_poisoned && cfg.attack.poison_mode == PoisonMode::LabelFlip {
                shard.flip_labels()
            } else {
                shard
            };
            let sampler = BatchSampler::new(shard.len(), cfg.batch_size, cfg.seed, worker_stream(publisher, w))?;
            workers.push(WorkerNode {
                id: worker_id(publisher, w),
                compressor: CompressorState::new(spec.param_count()),
                shard,
                sampler,
                poisoned: is_poisoned,
            });
        }

        let (committee, chain) = if cfg.scenario.uses_consensus() {
            let candidates: Vec<MinerState> = (0..cfg.miners)
                .map(|m| {
                    let identity = authority
                        .identity(&miner_id(publisher, m))
                        .expect("miners registered in run_experiment")
                        .clone();
                    MinerState::candidate(identity, cfg.min_deposit)
                })
                .collect();
            // Each worker votes for a seeded subset of candidates.
            let mut votes: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
            for w in 0..cfg.workers {
                let mut rng = derive_rng(cfg.seed, "miner-votes", &[publisher as u64, w as u64]);
                let ballot: Vec<EntityId> = (0..cfg.miners)
                    .filter(|_| rng.random_range(0..2u32) == 0)
                    .map(|m| miner_id(publisher, m))
                    .collect();
                votes.insert(worker_id(publisher, w), ballot);
            }
            let election_seed = derive_seed(cfg.seed, "rotation", &[publisher as u64]);
            let committee = elect_delegates(&candidates, &votes, cfg.miners, cfg.min_deposit, election_seed)?;

            let mut access: BTreeSet<EntityId> = (0..cfg.workers).map(|w| worker_id(publisher, w)).collect();
            access.insert(publisher_id(publisher));
            let writers: BTreeSet<EntityId> = committee.members().iter().map(|m| m.id().clone()).collect();
            access.extend(writers.iter().cloned());
            let chain = SubchainState::create(
                &training_chain_id(publisher),
                ChainKind::Training,
                access,
                writers,
                committee.leader(),
                0,
                authority,
            )?;
            (Some(committee), Some(chain))
        } else {
            (None, None)
        };

        Ok(Self {
            cfg,
            publisher,
            authority,
            spec,
            global,
            workers,
            committee,
            chain,
            policy: QualityPolicy { theta: cfg.theta, test_set: policy_set },
            metrics_eval,
            queue: EventQueue::new(),
            jitter_rng: derive_rng(cfg.seed, "latency-jitter", &[publisher as u64]),
            entries_sent: 0,
            pending_slashes: Vec::new(),
            slashed_total: 0,
            anchored_height: 0,
            anchors: Vec::new(),
            log: Vec::new(),
            metrics: Vec::new(),
            stop_after_commits,
            commits: 0,
        })
    }

    fn rotation_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, "rotation", &[self.publisher as u64])
    }

    /// Extra seeded latency on worker-side legs when jitter is enabled.
    fn jitter(&mut self) -> u64 {
        if self.cfg.cost.jitter_ms == 0 {
            return 0;
        }
        self.jitter_rng.random_range(0..=self.cfg.cost.jitter_ms)
    }

    fn send(&mut self, src: EntityId, dst: EntityId, msg_type: &'static str, body_len: usize, deliver_at: u64) -> CoreResult<()> {
        self.queue.schedule(SimEvent {
            deliver_at,
            src,
            dst,
            message: msg_type,
            size_bytes: msg_len(body_len),
        })
    }

    fn drain(&mut self) {
        while self.queue.next_event(|t| t).is_some() {}
    }

    /// One worker's raw (possibly poisoned) batch gradient this round.
    fn worker_gradient(&mut self, w: usize, round: u32) -> CoreResult<GradientVector> {
        let batch: Vec<u32> = self.workers[w].sampler.next_batch().to_vec();
        let node = &self.workers[w];
        let g = gradient(self.spec, &self.global, &node.shard.batch(&batch))?;
        if node.poisoned && self.cfg.attack.poison_mode != PoisonMode::LabelFlip {
            return Ok(poison_gradient(
                &g,
                self.cfg.attack.poison_mode,
                self.cfg.seed,
                w as u64,
                round as u64,
            ));
        }
        Ok(g)
    }

    /// Runs to the configured horizon; returns the outcome bundle.
    fn run(mut self, fault_script: &FaultScript) -> CoreResult<TaskOutcome> {
        for round in 1..=self.cfg.rounds as u32 {
            if let Some(stop) = self.stop_after_commits {
                if self.commits >= stop {
                    break;
                }
            }
            if self.cfg.scenario.uses_consensus() {
                self.round_bfel(round, fault_script)?;
            } else {
                self.round_fel(round)?;
            }
        }
        let trade = if self.cfg.scenario.uses_consensus() && self.cfg.trading_enabled {
            Some(TradeRequest {
                timestamp_ms: self.queue.now(),
                publisher: self.publisher,
                model_digest: self.global.digest(),
            })
        } else {
            None
        };
        Ok(TaskOutcome {
            metrics: core::mem::take(&mut self.metrics),
            final_model: self.global.clone(),
            chain: self.chain,
            log: self.log,
            anchors: self.anchors,
            trade,
            time_ms: self.queue.now(),
            trace: self.queue.into_trace(),
        })
    }

    /// Uploads all worker updates; advances the clock to the last arrival.
    fn upload_phase(
        &mut self,
        round: u32,
        dst_of: &dyn Fn(usize) -> EntityId,
    ) -> CoreResult<UploadedUpdates> {
        let t0 = self.queue.now();
        let mut sparse_updates = Vec::new();
        let mut dense_updates = Vec::new();
        for w in 0..self.workers.len() {
            let g = self.worker_gradient(w, round)?;
            if self.cfg.scenario.uses_compression() {
                let g = match self.cfg.compression.clip_norm {
                    Some(c) => clip_gradient(&g, c)?,
                    None => g,
                };
                let node = &mut self.workers[w];
                node.compressor.accumulate(&g, &self.cfg.compression)?;
                let mut sparse = node.compressor.sparsify(&self.cfg.compression)?;
                // Compressor rounds and protocol rounds advance together
                // (one accumulation per round); retag defensively if they
                // ever diverge after a dropped round.
                if sparse.round() != round {
                    sparse = SparseGradient::new(sparse.entries().to_vec(), sparse.dim(), round)?;
                }
                let id = node.id.clone();
                let signing = LocalUpdate::signing_bytes(&id, round, &sparse, t0);
                let update = LocalUpdate {
                    worker_id: id.clone(),
                    round,
                    signature: self.authority.sign(&id, &signing)?,
                    timestamp_ms: t0,
                    sparse,
                };
                self.entries_sent += update.sparse.len() as u64;
                let body_len = update.encode().len();
                let deliver = t0 + self.cfg.cost.transit_ms(msg_len(body_len)) + self.jitter();
                self.send(id, dst_of(w), MSG_LOCAL_UPDATE, body_len, deliver)?;
                sparse_updates.push(update);
            } else {
                let id = self.workers[w].id.clone();
                let values = g.into_values();
                let body = dense_update_body(&id, round, &values);
                self.entries_sent += values.len() as u64;
                let deliver = t0 + self.cfg.cost.transit_ms(msg_len(body.len())) + self.jitter();
                self.send(id.clone(), dst_of(w), MSG_DENSE_UPDATE, body.len(), deliver)?;
                dense_updates.push((id, values));
            }
        }
        self.drain();
        Ok((sparse_updates, dense_updates))
    }

    fn push_metrics_row(&mut self, round: u32, qualified_count: u32, prev_bytes: u64) -> CoreResult<()> {
        let accuracy = evaluate_accuracy(self.spec, &self.global, &self.metrics_eval.all())?;
        let dim = self.spec.param_count() as u64;
        let slots = round as u64 * self.workers.len() as u64;
        let denom = self.entries_sent.max(1) as f64;
        let compression = (dim * slots) as f64 / denom;
        let exposure = self.entries_sent as f64 / (dim * slots) as f64;
        self.metrics.push(MetricsRow {
            round,
            global_test_accuracy: accuracy,
            bytes_this_round: self.queue.total_bytes() - prev_bytes,
            cumulative_bytes: self.queue.total_bytes(),
            compression_ratio: compression,
            exposure_ratio: exposure,
            qualified_count,
            slashed_count: self.slashed_total,
            simulated_time_ms: self.queue.now(),
        });
        Ok(())
    }

    /// One FEL round: upload to the aggregator, broadcast the update set,
    /// apply the mean. No quality gate, no consensus delay.
    fn round_fel(&mut self, round: u32) -> CoreResult<()> {
        let prev_bytes = self.queue.total_bytes();
        let agg = aggregator_id(self.publisher);
        let agg_for = agg.clone();
        let (sparse_updates, dense_updates) = self.upload_phase(round, &move |_| agg_for.clone())?;
        let t_up = self.queue.now();

        let body_len = if self.cfg.scenario.uses_compression() {
            update_set_body(round, &sparse_updates).len()
        } else {
            dense_set_body(round, &dense_updates).len()
        };
        for w in 0..self.workers.len() {
            let deliver = t_up + self.cfg.cost.transit_ms(msg_len(body_len)) + self.jitter();
            self.send(agg.clone(), self.workers[w].id.clone(), MSG_GLOBAL_UPDATE, body_len, deliver)?;
        }
        self.drain();

        // All workers derive the same model; compute it once.
        self.global = if self.cfg.scenario.uses_compression() {
            let sparse: Vec<SparseGradient> = sparse_updates.iter().map(|u| u.sparse.clone()).collect();
            apply_mean_sparse(&self.global, &sparse, self.cfg.learning_rate)?
        } else {
            apply_mean_dense(&self.global, &dense_updates, self.cfg.learning_rate)?
        };
        self.commits += 1;
        self.push_metrics_row(round, self.workers.len() as u32, prev_bytes)
    }

    /// One BFEL round: upload to assigned verifiers, forward, evaluate,
    /// cross-verify, assemble under the round leader, commit with >2/3
    /// agreement, then broadcast the committed update set.
    fn round_bfel(&mut self, round: u32, fault_script: &FaultScript) -> CoreResult<()> {
        let prev_bytes = self.queue.total_bytes();
        let committee_ref = self.committee.as_ref().expect("bfel mode has a committee");
        let leader = committee_ref.leader().clone();
        let verifiers = committee_ref.verifiers();
        if verifiers.is_empty() {
            return Err(CoreError::FederationHalt("no verifiers remain".to_string()));
        }

        // Workers submit to their nearest verifier (static ring assignment
        // over this round's verifier set).
        let vlist = verifiers.clone();
        let dst_of = move |w: usize| vlist[w % vlist.len()].clone();
        let (updates, _) = self.upload_phase(round, &dst_of)?;
        let t_up = self.queue.now();

        // Admission: signature and round checks.
        let mut admitted: BTreeMap<EntityId, LocalUpdate> = BTreeMap::new();
        for u in updates {
            if u.round != round {
                self.log.push(format!(
                    "round {round}: discarded update from {} with stale round {}",
                    u.worker_id, u.round
                ));
                continue;
            }
            if !u.verify(self.authority) {
                self.log.push(format!(
                    "round {round}: discarded update with bad signature from {}",
                    u.worker_id
                ));
                continue;
            }
            admitted.insert(u.worker_id.clone(), u);
        }
        let update_ids: Vec<EntityId> = admitted.keys().cloned().collect();

        // Forwarding: the receiving verifier relays each update to its peers
        // so every verifier scores every update (backbone traffic).
        for (w, id) in update_ids.iter().enumerate() {
            let src = verifiers[w % verifiers.len()].clone();
            let body_len = admitted[id].encode().len();
            for peer in &verifiers {
                if peer != &src {
                    self.send(src.clone(), peer.clone(), MSG_UPDATE_FORWARD, body_len, t_up)?;
                }
            }
        }

        // Honest verdicts, computed once: every honest verifier reaches the
        // same deterministic outcome on the same data.
        let baseline = evaluate_accuracy(self.spec, &self.global, &self.policy.test_set.all())?;
        let mut honest: BTreeSet<EntityId> = BTreeSet::new();
        for (id, u) in &admitted {
            let (ok, _) = evaluate_update_with_baseline(
                self.spec,
                u,
                &self.global,
                baseline,
                &self.policy,
                self.cfg.learning_rate,
                self.authority,
            )?;
            if ok {
                honest.insert(id.clone());
            }
        }
        let inverted: BTreeSet<EntityId> =
            update_ids.iter().filter(|id| !honest.contains(*id)).cloned().collect();

        // Per-verifier behavior from the fault script (directives apply to
        // the verifier role; a scripted miner holding the leader role still
        // assembles per protocol).
        let mut responses: Vec<VerifierResponse> = Vec::new();
        let mut equivocators: Vec<EntityId> = Vec::new();
        let mut verdicts: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
        for v in &verifiers {
            match fault_script.directive(round, v) {
                FaultDirective::Honest => {
                    verdicts.insert(v.clone(), honest.clone());
                }
                FaultDirective::InvertVerdicts => {
                    verdicts.insert(v.clone(), inverted.clone());
                }
                FaultDirective::Withhold => {
                    self.log.push(format!("round {round}: {v} withheld its response"));
                }
                FaultDirective::Equivocate => {
                    equivocators.push(v.clone());
                }
            }
        }

        // Verdict broadcasts among verifiers, then signed responses to the
        // leader carrying the per-peer agreement bits.
        for (v, set) in &verdicts {
            let body = verdict_body(v, round, set);
            for peer in &verifiers {
                if peer != v {
                    self.send(v.clone(), peer.clone(), MSG_VERDICT, body.len(), t_up)?;
                }
            }
        }
        for (v, set) in &verdicts {
            let comparison: Vec<(EntityId, bool)> = verdicts
                .iter()
                .filter(|(peer, _)| *peer != v)
                .map(|(peer, peer_set)| (peer.clone(), peer_set == set))
                .collect();
            let signing = VerifierResponse::signing_bytes(v, round, set, &comparison, t_up);
            let response = VerifierResponse {
                verifier_id: v.clone(),
                round,
                qualified: set.clone(),
                comparison,
                signature: self.authority.sign(v, &signing)?,
                timestamp_ms: t_up,
            };
            let body_len = response.encode().len();
            self.send(v.clone(), leader.clone(), MSG_RESPONSE, body_len, t_up)?;
            responses.push(response);
        }

        // Equivocators send two conflicting signed responses; the leader
        // detects the conflict, slashes immediately, and ignores both.
        let mut round_slashes: Vec<SlashRecord> = core::mem::take(&mut self.pending_slashes);
        for v in &equivocators {
            for set in [honest.clone(), inverted.clone()] {
                let signing = VerifierResponse::signing_bytes(v, round, &set, &[], t_up);
                let response = VerifierResponse {
                    verifier_id: v.clone(),
                    round,
                    qualified: set,
                    comparison: Vec::new(),
                    signature: self.authority.sign(v, &signing)?,
                    timestamp_ms: t_up,
                };
                let body_len = response.encode().len();
                self.send(v.clone(), leader.clone(), MSG_RESPONSE, body_len, t_up)?;
            }
            let committee = self.committee.as_mut().expect("bfel");
            if let Some(rec) = committee.slash(v, SlashReason::Equivocation, round) {
                self.log.push(format!("round {round}: slashed {v} for equivocation"));
                self.slashed_total += 1;
                round_slashes.push(rec);
            }
        }
        self.drain();

        // Cross-verification and the next-model preview (its digest goes in
        // the block; verifier count excludes mid-round slashes).
        let tallies = cross_verify(&responses, &update_ids);
        let vcount = self.committee.as_ref().expect("bfel").verifiers().len() as u32;
        let qualified_majority: Vec<SparseGradient> = tallies
            .approvals
            .iter()
            .filter(|(_, &c)| 2 * c > vcount)
            .map(|(id, _)| admitted[id].sparse.clone())
            .collect();
        let next_global = apply_mean_sparse(&self.global, &qualified_majority, self.cfg.learning_rate)?;

        // Pending-block broadcast and votes (backbone traffic; the flat
        // consensus delay charges for this whole phase).
        let pending_body = {
            let mut w = Writer::new();
            w.u32(round);
            w.u32(tallies.approvals.len() as u32);
            for id in tallies.approvals.keys() {
                w.str(id.as_str());
            }
            w.finish().len()
        };
        let current_verifiers = self.committee.as_ref().expect("bfel").verifiers();
        for v in &current_verifiers {
            self.send(leader.clone(), v.clone(), MSG_PENDING_BLOCK, pending_body, t_up)?;
        }
        for v in &current_verifiers {
            let body = block_vote_body(v, round, true);
            self.send(v.clone(), leader.clone(), MSG_BLOCK_VOTE, body.len(), t_up)?;
        }
        self.drain();

        let rotation_seed = self.rotation_seed();
        let mut commit_time = t_up + self.cfg.cost.consensus_delay_ms;
        let chain = self.chain.as_mut().expect("bfel mode has a chain");
        let committee = self.committee.as_mut().expect("bfel");
        let mut decision = assemble_and_commit(
            &leader,
            committee,
            round,
            &admitted,
            &responses,
            &tallies,
            round_slashes.clone(),
            next_global.digest(),
            chain,
            commit_time,
            self.authority,
        )?;

        // Liveness: one retry under a rotated leader, then drop the round.
        if let CommitDecision::Failed { approving, verifier_count } = decision {
            self.log.push(format!(
                "round {round}: commit failed ({approving}/{verifier_count} approvals), retrying with rotated leader"
            ));
            committee.rotate_roles(rotation_seed, round * 2 + 1)?;
            let retry_leader = committee.leader().clone();
            commit_time = t_up + 2 * self.cfg.cost.consensus_delay_ms;
            decision = assemble_and_commit(
                &retry_leader,
                committee,
                round,
                &admitted,
                &responses,
                &tallies,
                round_slashes.clone(),
                next_global.digest(),
                chain,
                commit_time,
                self.authority,
            )?;
        }

        let qualified_count = match &decision {
            CommitDecision::Committed { qualified, .. } => {
                // Poisoning gate: nothing unqualified under the honest policy
                // may ever be committed.
                for id in qualified {
                    debug_assert!(honest.contains(id), "committed unqualified update {id}");
                }
                let commit_leader = self.committee.as_ref().expect("bfel").leader().clone();
                // Block synchronization among the other miners.
                let block_len = self.chain.as_ref().expect("bfel").head().encode().len();
                let others: Vec<EntityId> = self
                    .committee
                    .as_ref()
                    .expect("bfel")
                    .active()
                    .map(|m| m.id().clone())
                    .filter(|id| id != &commit_leader)
                    .collect();
                for m in others {
                    self.send(commit_leader.clone(), m, MSG_COMMIT_SYNC, block_len, commit_time)?;
                }
                // Workers download the committed update set.
                let committed: Vec<LocalUpdate> = qualified.iter().map(|id| admitted[id].clone()).collect();
                let body_len = update_set_body(round, &committed).len();
                for w in 0..self.workers.len() {
                    let deliver = commit_time + self.cfg.cost.transit_ms(msg_len(body_len)) + self.jitter();
                    self.send(commit_leader.clone(), self.workers[w].id.clone(), MSG_GLOBAL_UPDATE, body_len, deliver)?;
                }
                self.drain();
                self.global = next_global;
                self.commits += 1;

                // Disagreement streaks against the committed verdict set.
                let committed_set: BTreeSet<EntityId> = qualified.iter().cloned().collect();
                let verdict_list: Vec<(EntityId, bool)> = responses
                    .iter()
                    .map(|r| (r.verifier_id.clone(), r.qualified != committed_set))
                    .collect();
                let committee = self.committee.as_mut().expect("bfel");
                let due = committee.note_disagreements(&verdict_list, 3);
                for id in due {
                    if let Some(rec) = committee.slash(&id, SlashReason::FalseVerification, round) {
                        self.log.push(format!(
                            "round {round}: slashed {id} for repeated false verification"
                        ));
                        self.slashed_total += 1;
                        self.pending_slashes.push(rec);
                    }
                }
                qualified.len() as u32
            }
            CommitDecision::Failed { approving, verifier_count } => {
                self.log.push(format!(
                    "round {round}: dropped after retry ({approving}/{verifier_count} approvals)"
                ));
                let body = round_failed_body(round);
                let fail_leader = self.committee.as_ref().expect("bfel").leader().clone();
                for w in 0..self.workers.len() {
                    let deliver = commit_time + self.cfg.cost.transit_ms(msg_len(body.len())) + self.jitter();
                    self.send(fail_leader.clone(), self.workers[w].id.clone(), MSG_ROUND_FAILED, body.len(), deliver)?;
                }
                self.drain();
                0
            }
        };

        // Periodic anchoring of newly committed blocks.
        if matches!(decision, CommitDecision::Committed { .. }) {
            let height = self.chain.as_ref().expect("bfel").height();
            if height + 1 - self.anchored_height >= self.cfg.anchor_period {
                self.anchors.push(AnchorRequest {
                    timestamp_ms: commit_time,
                    publisher: self.publisher,
                    up_to_height: height,
                });
                self.anchored_height = height + 1;
            }
        }

        // Role rotation for the next round.
        let committee = self.committee.as_mut().expect("bfel");
        committee.rotate_roles(rotation_seed, (round + 1) * 2)?;

        self.push_metrics_row(round, qualified_count, prev_bytes)
    }
}

/// Registers every entity a run needs; ids are unique per federation.
pub fn build_authority(cfg: &RunConfig) -> CoreResult<Authority> {
    let mut authority = Authority::new(cfg.seed);
    for p in 0..cfg.publishers {
        authority.register(publisher_id(p), Role::Publisher)?;
        for w in 0..cfg.workers {
            authority.register(worker_id(p, w), Role::Worker)?;
        }
        if cfg.scenario.uses_consensus() {
            for m in 0..cfg.miners {
                authority.register(miner_id(p, m), Role::Miner)?;
            }
        } else {
            authority.register(aggregator_id(p), Role::Miner)?;
        }
    }
    if cfg.scenario.uses_consensus() {
        authority.register("rec-main".into(), Role::Miner)?;
        authority.register("rec-trade".into(), Role::Miner)?;
        if cfg.trading_enabled {
            authority.register("buyer0".into(), Role::Buyer)?;
        }
    }
    Ok(authority)
}

/// Runs the configured scenario end to end.
pub fn run_experiment(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> CoreResult<RunOutput> {
    run_experiment_until(cfg, train, test, None)
}

/// Like [`run_experiment`] but stopping each publisher's round loop after a
/// number of committed rounds (the event-loop stop condition).
pub fn run_experiment_until(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    stop_after_commits: Option<u32>,
) -> CoreResult<RunOutput> {
    cfg.validate(train.len())?;
    if train.feature_dim() != test.feature_dim() || train.num_classes() != test.num_classes() {
        return Err(CoreError::InvalidConfig("train/test schema mismatch".to_string()));
    }
    let authority = build_authority(cfg)?;

    let mut outcomes: Vec<TaskOutcome> = Vec::new();
    for p in 0..cfg.publishers {
        let runner = TaskRunner::new(cfg, p, &authority, train, test, stop_after_commits)?;
        outcomes.push(runner.run(&cfg.fault_script)?);
    }

    // Cross-chain phase: anchors then trades, serialized on the shared
    // chains in timestamp order (ties by publisher index).
    let (trading_chain, main_chain) = if cfg.scenario.uses_consensus() {
        let rec_main: EntityId = "rec-main".into();
        let rec_trade: EntityId = "rec-trade".into();
        let mut main = SubchainState::create(
            "main",
            ChainKind::Main,
            BTreeSet::new(),
            [rec_main.clone()].into_iter().collect(),
            &rec_main,
            0,
            &authority,
        )?;
        let mut access: BTreeSet<EntityId> = (0..cfg.publishers).map(publisher_id).collect();
        if cfg.trading_enabled {
            access.insert("buyer0".into());
        }
        let mut trading = SubchainState::create(
            "trading",
            ChainKind::Trading,
            access,
            [rec_trade.clone()].into_iter().collect(),
            &rec_trade,
            0,
            &authority,
        )?;

        let mut anchor_requests: Vec<&AnchorRequest> =
            outcomes.iter().flat_map(|o| o.anchors.iter()).collect();
        anchor_requests.sort_by_key(|a| (a.timestamp_ms, a.publisher));
        for req in anchor_requests {
            let chain = outcomes[req.publisher].chain.as_ref().expect("bfel outcome has a chain");
            anchor_to_main_capped(
                chain,
                &mut main,
                cfg.anchor_period,
                false,
                req.up_to_height,
                &rec_main,
                req.timestamp_ms,
                &authority,
            )?;
        }
        // Flush unanchored tails so every head is anchored before trading.
        for o in &outcomes {
            let chain = o.chain.as_ref().expect("bfel outcome has a chain");
            if anchored_up_to(&main, chain.chain_id()) != Some(chain.height()) {
                anchor_to_main(chain, &mut main, cfg.anchor_period, true, &rec_main, o.time_ms, &authority)?;
            }
        }

        let mut trades: Vec<&TradeRequest> = outcomes.iter().filter_map(|o| o.trade.as_ref()).collect();
        trades.sort_by_key(|t| (t.timestamp_ms, t.publisher));
        if cfg.trading_enabled {
            let chains: Vec<&SubchainState> = outcomes.iter().filter_map(|o| o.chain.as_ref()).collect();
            for req in trades {
                let seller = publisher_id(req.publisher);
                let buyer: EntityId = "buyer0".into();
                let signing = TradeRecord::signing_bytes(&seller, &buyer, &req.model_digest, cfg.trade_price, req.timestamp_ms);
                let trade = TradeRecord {
                    seller_id: seller.clone(),
                    buyer_id: buyer.clone(),
                    model_digest: req.model_digest,
                    price: cfg.trade_price,
                    timestamp_ms: req.timestamp_ms,
                    seller_signature: authority.sign(&seller, &signing)?,
                    buyer_signature: authority.sign(&buyer, &signing)?,
                };
                record_trade(trade, &mut trading, &main, &chains, &rec_trade, req.timestamp_ms, &authority)?;
            }
            // The trading chain is anchored too once it holds records.
            if trading.height() > 0 {
                let ts = outcomes.iter().map(|o| o.time_ms).max().unwrap_or(0);
                anchor_to_main(&trading, &mut main, cfg.anchor_period, true, &rec_main, ts, &authority)?;
            }
        }
        (Some(trading), Some(main))
    } else {
        (None, None)
    };

    // Synthesized cross-chain trace records (anchor and trade messages).
    let mut extra_trace: Vec<TraceRecord> = Vec::new();
    if let Some(main) = &main_chain {
        for block in main.blocks().iter().skip(1) {
            if let crate::ledger::BlockPayload::Anchor(entries) = &block.payload {
                for e in entries {
                    let mut w = Writer::new();
                    w.str(&e.record.subchain_id);
                    w.u64(e.record.from_height);
                    w.u64(e.record.to_height);
                    w.raw(&e.record.anchored_root);
                    w.str(&e.locator);
                    extra_trace.push(TraceRecord {
                        time_ms: block.timestamp_ms,
                        src: "rec-main".into(),
                        dst: "main".into(),
                        msg_type: MSG_ANCHOR.to_string(),
                        size_bytes: msg_len(w.len()),
                    });
                }
            }
        }
    }
    if let Some(trading) = &trading_chain {
        for block in trading.blocks().iter().skip(1) {
            if let crate::ledger::BlockPayload::Trade(trades) = &block.payload {
                for t in trades {
                    let mut w = Writer::new();
                    t.encode_into(&mut w);
                    extra_trace.push(TraceRecord {
                        time_ms: block.timestamp_ms,
                        src: t.seller_id.clone(),
                        dst: "rec-trade".into(),
                        msg_type: MSG_TRADE.to_string(),
                        size_bytes: msg_len(w.len()),
                    });
                }
            }
        }
    }

    // Merge per-publisher traces by time (stable: publisher order on ties,
    // cross-chain records last).
    let mut merged: Vec<(u64, usize, usize, TraceRecord)> = Vec::new();
    for (p, o) in outcomes.iter().enumerate() {
        for (i, rec) in o.trace.iter().enumerate() {
            merged.push((rec.time_ms, p, i, rec.clone()));
        }
    }
    for (i, rec) in extra_trace.into_iter().enumerate() {
        merged.push((rec.time_ms, usize::MAX, i, rec));
    }
    merged.sort_by_key(|e| (e.0, e.1, e.2));
    let trace: Vec<TraceRecord> = merged.into_iter().map(|(_, _, _, r)| r).collect();

    let total_bytes = trace.iter().map(|r| r.size_bytes).sum();
    let total_time_ms = outcomes.iter().map(|o| o.time_ms).max().unwrap_or(0);
    let final_models: Vec<ModelParameters> = outcomes.iter().map(|o| o.final_model.clone()).collect();
    let spec = cfg.model.spec(train.feature_dim(), train.num_classes() as usize);
    let final_accuracy = evaluate_accuracy(spec, &final_models[0], &test.all())?;

    // Standing metadata notes carried with every run's outputs.
    let mut log: Vec<String> = alloc::vec![
        "note: exposure_ratio is the fraction of gradient coordinates ever transmitted, a proxy for inference-attack surface (no reconstruction attack is simulated)".to_string(),
        "note: simulated_time_ms models communication plus consensus delay only; node computation time is out of scope".to_string(),
    ];
    for (p, o) in outcomes.iter_mut().enumerate() {
        for line in o.log.drain(..) {
            log.push(format!("publisher {p}: {line}"));
        }
    }

    Ok(RunOutput {
        metrics: core::mem::take(&mut outcomes[0].metrics),
        trace,
        training_chains: outcomes.into_iter().filter_map(|o| o.chain).collect(),
        trading_chain,
        main_chain,
        final_models,
        final_accuracy,
        total_bytes,
        total_time_ms,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, BlobsSpec};

    fn small_blobs(seed: u64) -> (Dataset, Dataset) {
        let spec = BlobsSpec {
            samples: 600,
            features: 12,
            classes: 3,
            informative: 8,
            center_scale: 3.0,
            noise_sigma: 1.0,
        };
        let data = generate_blobs(&spec, seed).unwrap();
        data.split_fraction(0.7, seed).unwrap()
    }

    fn small_config(scenario: Scenario) -> RunConfig {
        RunConfig {
            seed: 42,
            scenario,
            workers: 4,
            miners: 5,
            publishers: 1,
            rounds: 6,
            batch_size: 16,
            learning_rate: 0.5,
            model: ModelKind::Logistic,
            compression: CompressionConfig { rho_percent: 100.0, momentum: 0.0, clip_norm: None },
            theta: 1.0,
            verify_samples: 64,
            metrics_eval_samples: 64,
            trading_enabled: true,
            ..RunConfig::default()
        }
    }

    #[test]
    fn bfel_run_produces_valid_artifacts() {
        let (train, test) = small_blobs(1);
        let cfg = small_config(Scenario::BfelGcs);
        let out = run_experiment(&cfg, &train, &test).unwrap();
        assert_eq!(out.metrics.len(), 6);
        assert_eq!(out.training_chains.len(), 1);
        let authority = build_authority(&cfg).unwrap();
        assert!(out.training_chains[0].validate_chain(Some(&authority)).is_valid());
        let main = out.main_chain.as_ref().unwrap();
        assert!(main.validate_chain(Some(&authority)).is_valid());
        let trading = out.trading_chain.as_ref().unwrap();
        assert!(trading.validate_chain(Some(&authority)).is_valid());
        // Head fully anchored, one trade recorded.
        assert_eq!(
            anchored_up_to(main, out.training_chains[0].chain_id()),
            Some(out.training_chains[0].height())
        );
        let digest = out.final_models[0].digest();
        assert_eq!(crate::ledger::find_trades(trading, &digest).len(), 1);
        // Six committed rounds on the chain.
        assert_eq!(out.training_chains[0].height(), 6);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (train, test) = small_blobs(2);
        let cfg = small_config(Scenario::BfelGcs);
        let a = run_experiment(&cfg, &train, &test).unwrap();
        let b = run_experiment(&cfg, &train, &test).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.final_models[0], b.final_models[0]);
        assert_eq!(a.training_chains[0].blocks(), b.training_chains[0].blocks());
    }

    #[test]
    fn fel_and_bfel_times_differ_by_consensus_delay_exactly() {
        let (train, test) = small_blobs(3);
        let mut cfg = small_config(Scenario::FelGcs);
        cfg.trading_enabled = false;
        let fel = run_experiment(&cfg, &train, &test).unwrap();
        cfg.scenario = Scenario::BfelGcs;
        let bfel = run_experiment(&cfg, &train, &test).unwrap();
        let rounds = cfg.rounds as u64;
        assert_eq!(bfel.total_time_ms, fel.total_time_ms + rounds * cfg.cost.consensus_delay_ms);
        // Same per-round accuracy trajectory (dense, vacuous gate).
        for (a, b) in fel.metrics.iter().zip(&bfel.metrics) {
            assert_eq!(a.global_test_accuracy, b.global_test_accuracy);
        }
    }

    #[test]
    fn dense_fel_matches_gcs_fel_with_identity_compression() {
        let (train, test) = small_blobs(4);
        let mut cfg = small_config(Scenario::Fel);
        cfg.trading_enabled = false;
        let dense = run_experiment(&cfg, &train, &test).unwrap();
        cfg.scenario = Scenario::FelGcs;
        let gcs = run_experiment(&cfg, &train, &test).unwrap();
        // ρ=100, m=0, no clipping: identical trajectories coordinate-wise.
        for (a, b) in dense.final_models[0].values().iter().zip(gcs.final_models[0].values()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Real sparsity is what saves bytes (at ρ=100 the index/value pairs
        // cost more than the dense encoding).
        cfg.compression.rho_percent = 10.0;
        cfg.compression.momentum = 0.9;
        let sparse = run_experiment(&cfg, &train, &test).unwrap();
        assert!(sparse.total_bytes < dense.total_bytes);
    }

    #[test]
    fn stop_condition_ends_after_first_commit() {
        let (train, test) = small_blobs(5);
        let cfg = small_config(Scenario::BfelGcs);
        let out = run_experiment_until(&cfg, &train, &test, Some(1)).unwrap();
        assert_eq!(out.training_chains[0].height(), 1);
        assert_eq!(out.metrics.len(), 1);
        assert!(out.trace.iter().any(|r| r.msg_type == MSG_GLOBAL_UPDATE));
    }

    #[test]
    fn trace_conservation_every_message_delivered_once() {
        let (train, test) = small_blobs(6);
        let cfg = small_config(Scenario::BfelGcs);
        let out = run_experiment(&cfg, &train, &test).unwrap();
        // 4 workers × 6 rounds uploads, and one download each per round.
        let uploads = out.trace.iter().filter(|r| r.msg_type == MSG_LOCAL_UPDATE).count();
        assert_eq!(uploads, 24);
        let downloads = out.trace.iter().filter(|r| r.msg_type == MSG_GLOBAL_UPDATE).count();
        assert_eq!(downloads, 24);
    }

    #[test]
    fn communication_cost_recomputation_matches_loop_clock() {
        let (train, test) = small_blobs(8);
        for scenario in [Scenario::Fel, Scenario::FelGcs, Scenario::BfelGcs] {
            let mut cfg = small_config(scenario);
            cfg.trading_enabled = false;
            let out = run_experiment(&cfg, &train, &test).unwrap();
            let cost = crate::netsim::communication_cost(
                &out.trace,
                &cfg.cost,
                &[MSG_LOCAL_UPDATE, MSG_DENSE_UPDATE],
                &[MSG_GLOBAL_UPDATE, MSG_ROUND_FAILED],
                scenario.uses_consensus(),
            );
            assert_eq!(cost.total_bytes, out.total_bytes, "{scenario:?} bytes");
            assert_eq!(cost.total_time_ms, out.total_time_ms, "{scenario:?} time");
            assert_eq!(cost.rounds, cfg.rounds as u64, "{scenario:?} rounds");
        }
    }

    #[test]
    fn label_flip_and_noise_poisoning_change_the_run() {
        let (train, test) = small_blobs(10);
        let mut cfg = small_config(Scenario::FelGcs);
        cfg.trading_enabled = false;
        let clean = run_experiment(&cfg, &train, &test).unwrap();

        cfg.attack.poison_fraction = 0.25; // 1 of 4 workers
        cfg.attack.poison_mode = crate::adversary::PoisonMode::LabelFlip;
        let flipped = run_experiment(&cfg, &train, &test).unwrap();
        assert_ne!(clean.final_models[0], flipped.final_models[0]);

        cfg.attack.poison_mode = crate::adversary::PoisonMode::GaussianNoise { sigma: 0.5 };
        let noisy_a = run_experiment(&cfg, &train, &test).unwrap();
        let noisy_b = run_experiment(&cfg, &train, &test).unwrap();
        assert_ne!(clean.final_models[0], noisy_a.final_models[0]);
        // Seeded noise: reruns identical.
        assert_eq!(noisy_a.final_models[0], noisy_b.final_models[0]);
    }

    #[test]
    fn equivocating_verifier_is_slashed_immediately() {
        let (train, test) = small_blobs(11);
        let mut cfg = small_config(Scenario::BfelGcs);
        cfg.trading_enabled = false;
        // One miner equivocates whenever it holds the verifier role; it is
        // slashed in its first such round (a leader round would pass without
        // a response).
        cfg.fault_script
            .set_all_rounds(miner_id(0, 1), crate::adversary::FaultDirective::Equivocate);
        let out = run_experiment(&cfg, &train, &test).unwrap();
        let chain = &out.training_chains[0];
        let mut slash = None;
        for block in chain.blocks() {
            if let crate::ledger::BlockPayload::Training(p) = &block.payload {
                for s in &p.slashes {
                    if slash.is_none() {
                        slash = Some((s.miner_id.clone(), s.reason, s.round));
                    }
                }
            }
        }
        let (who, reason, slashed_at) = slash.expect("equivocator must be slashed on chain");
        assert_eq!(who, miner_id(0, 1));
        assert_eq!(reason, crate::consensus::SlashReason::Equivocation);
        // The run still commits every round.
        assert_eq!(chain.height(), cfg.rounds as u64);
        // The slashed miner never responds after its slash round.
        for block in chain.blocks() {
            if let crate::ledger::BlockPayload::Training(p) = &block.payload {
                if p.round > slashed_at {
                    assert!(p.responses.iter().all(|r| r.verifier_id != who));
                }
            }
        }
    }

    #[test]
    fn mass_withholding_drops_the_round_and_training_continues() {
        let (train, test) = small_blobs(12);
        let mut cfg = small_config(Scenario::BfelGcs);
        cfg.trading_enabled = false;
        // Committee of 5: leader + 4 verifiers. Three verifiers going quiet
        // in round 3 leaves at most 1 approval ≤ 2/3·4, failing both the
        // first attempt and the retry.
        for m in 0..5 {
            cfg.fault_script.set_round(3, miner_id(0, m), crate::adversary::FaultDirective::Withhold);
        }
        let out = run_experiment(&cfg, &train, &test).unwrap();
        let chain = &out.training_chains[0];
        // One committed block fewer than rounds; the dropped round's number
        // is recorded by its successor's payload skipping it.
        assert_eq!(chain.height(), cfg.rounds as u64 - 1);
        let failed_rows: Vec<&MetricsRow> =
            out.metrics.iter().filter(|r| r.qualified_count == 0).collect();
        assert_eq!(failed_rows.len(), 1);
        assert_eq!(failed_rows[0].round, 3);
        assert!(out.trace.iter().any(|r| r.msg_type == MSG_ROUND_FAILED));
        assert!(out.log.iter().any(|l| l.contains("dropped after retry")));
        // Later rounds keep committing with their protocol round numbers.
        if let crate::ledger::BlockPayload::Training(p) = &chain.blocks()[3].payload {
            assert_eq!(p.round, 4);
        } else {
            panic!("expected a training payload");
        }
    }

    #[test]
    fn latency_jitter_is_seeded_and_off_by_default() {
        let (train, test) = small_blobs(9);
        let mut cfg = small_config(Scenario::FelGcs);
        cfg.trading_enabled = false;
        let base = run_experiment(&cfg, &train, &test).unwrap();
        cfg.cost.jitter_ms = 20;
        let jittered_a = run_experiment(&cfg, &train, &test).unwrap();
        let jittered_b = run_experiment(&cfg, &train, &test).unwrap();
        // Same seed, same jitter: identical; jitter changes timing vs off.
        assert_eq!(jittered_a.trace, jittered_b.trace);
        assert_ne!(base.total_time_ms, jittered_a.total_time_ms);
        // Payload bytes are unaffected by timing.
        assert_eq!(base.total_bytes, jittered_a.total_bytes);
    }

    #[test]
    fn two_publishers_run_isolated_subchains() {
        let (train, test) = small_blobs(7);
        let mut cfg = small_config(Scenario::BfelGcs);
        cfg.publishers = 2;
        cfg.rounds = 5;
        let out = run_experiment(&cfg, &train, &test).unwrap();
        assert_eq!(out.training_chains.len(), 2);
        let authority = build_authority(&cfg).unwrap();
        for chain in &out.training_chains {
            assert!(chain.validate_chain(Some(&authority)).is_valid());
            assert_eq!(chain.height(), 5);
        }
        // No worker of task 0 can read task 1's chain.
        let outsider = worker_id(0, 0);
        assert!(!crate::ledger::check_access(&out.training_chains[1], &outsider));
        // Both heads anchored on the shared main chain.
        let main = out.main_chain.as_ref().unwrap();
        for chain in &out.training_chains {
            assert_eq!(anchored_up_to(main, chain.chain_id()), Some(chain.height()));
        }
        // Two trades, one per publisher.
        let trading = out.trading_chain.as_ref().unwrap();
        assert_eq!(trading.height(), 2);
    }
}
