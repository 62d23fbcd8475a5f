//! The per-device state machine, free of I/O.
//!
//! A driver feeds a node messages and timer expiries and asks it for the next
//! unit of work whenever it is idle. The node answers with effects: messages to
//! send, timers to arm, log records, checkpoints. Compute runs when a work item
//! is handed out; the driver applies its effects once `duration` has elapsed,
//! which is what lets the same node run under virtual and wall-clock time.
//!
//! One node is central: it owns stage 0, the data, the profile and every
//! decision about layout and recovery. Workers only follow.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::{ExecutionClock, Pass};
use crate::data::Dataset;
use crate::error::Error;
use crate::fault::{
    classify, plan_fetch_sources, plan_redistribution, successor_absorbs, update_worker_list,
    CommitCoordinator, CommitDecision, FaultCase, FaultDetector, FaultReport, ProbeResult,
    RedistributionPlan, WorkerId, WorkerList,
};
use crate::metrics::{EventKind, MetricsRecord};
use crate::model::{LayerParams, LayerStack, SgdConfig, WeightSet};
use crate::partitioner::{average_partition, optimal_partition, PartitionPoints};
use crate::pipeline::{
    schedule_next, warmup_for, Action, BatchMeta, PipelineConfig, ScheduleInput, StageExecutor,
    Status, TrainingState,
};
use crate::profiler::{
    estimate_capacity, profile_model, BandwidthMatrix, CapacityEstimate, LayerProfile,
    DEFAULT_REPETITIONS,
};
use crate::replication::{
    encode_checkpoint, ReplicaStore, ReplicationPolicy, Snapshot, SnapshotKind,
};
use crate::tensor::Tensor;
use crate::transport::{Message, NodeCondition, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStrategy {
    /// Re-partition the survivors optimally and move weights accordingly.
    Redistribute,
    /// Hand each failed stage to its neighbour without re-planning.
    SuccessorAbsorbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultPolicy {
    /// Batch timeout as a multiple of the expected round trip.
    pub timeout_factor: f64,
    /// Fixed batch timeout in seconds, overriding the adaptive one.
    pub timeout: Option<f64>,
    /// Lower bound on the adaptive batch timeout.
    pub min_timeout: f64,
    /// Wait for probe answers, per attempt.
    pub probe_timeout: f64,
    /// Wait for weight transfers and snapshot acks.
    pub transfer_timeout: f64,
    pub max_recoveries: u32,
    pub strategy: RecoveryStrategy,
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy {
            timeout_factor: 10.0,
            timeout: None,
            min_timeout: 0.0,
            probe_timeout: 1.0,
            transfer_timeout: 5.0,
            max_recoveries: 8,
            strategy: RecoveryStrategy::Redistribute,
        }
    }
}

/// Link bandwidths between workers, in bytes per second.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTable {
    pub default: f64,
    pub pairs: BTreeMap<(WorkerId, WorkerId), f64>,
}

impl BandwidthTable {
    pub fn uniform(bandwidth: f64) -> Self {
        BandwidthTable {
            default: bandwidth,
            pairs: BTreeMap::new(),
        }
    }

    pub fn get(&self, from: WorkerId, to: WorkerId) -> f64 {
        self.pairs.get(&(from, to)).copied().unwrap_or(self.default)
    }

    /// Links between consecutive stages of `roster`.
    pub fn matrix(&self, roster: &[WorkerId]) -> BandwidthMatrix {
        let links: Vec<f64> = roster.windows(2).map(|w| self.get(w[0], w[1])).collect();
        BandwidthMatrix::new(links)
            .unwrap_or_else(|_| BandwidthMatrix::uniform(roster.len(), self.default))
    }
}

/// Everything every node of one run agrees on before it starts.
#[derive(Debug, Clone)]
pub struct NodeSetup {
    pub stack: Arc<LayerStack>,
    pub dataset: Arc<Dataset>,
    pub sgd: SgdConfig,
    pub pipeline: PipelineConfig,
    pub replication: ReplicationPolicy,
    pub fault: FaultPolicy,
    /// Training stops after this batch id.
    pub total_batches: i64,
    /// First batch to train; nonzero when resuming from a checkpoint.
    pub start_batch: i64,
    pub initial_weights: Arc<WeightSet>,
    pub central: WorkerId,
    /// Candidate workers in preference order, central excluded.
    pub candidates: Vec<WorkerId>,
    pub bandwidths: BandwidthTable,
    /// Use this profile instead of measuring one.
    pub profile: Option<LayerProfile>,
    pub profile_repetitions: usize,
}

impl NodeSetup {
    pub fn layers(&self) -> usize {
        self.stack.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    ProbeTimeout {
        round: u64,
        attempt: u32,
    },
    BatchTimeout {
        batch: i64,
        generation: u64,
    },
    SnapshotAck {
        at_batch: u64,
        kind: SnapshotKind,
        attempt: u32,
    },
    FetchTimeout {
        generation: u64,
    },
    RecoveryTimeout {
        generation: u64,
    },
}

#[derive(Debug, Clone)]
pub enum Effect {
    Send(Message),
    Timer {
        delay: f64,
        kind: TimerKind,
    },
    Log(MetricsRecord),
    Checkpoint {
        at_batch: u64,
        bytes: Vec<u8>,
    },
    /// The central node trained the last batch.
    Finished,
    Abort(String),
}

/// A compute step whose effects land `duration` seconds after it starts.
#[derive(Debug, Clone)]
pub struct Work {
    pub duration: f64,
    pub effects: Vec<Effect>,
    pub pass: Pass,
    pub batch: i64,
    pub stage: usize,
    pub last_stage: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Selecting,
    Syncing,
    Training,
    /// Draining into, or waiting on, a planned re-partition.
    Repartitioning,
    Recovering,
    Done,
}

#[derive(Debug)]
struct StageRuntime {
    exec: StageExecutor,
    fwd: BTreeMap<i64, (BatchMeta, Tensor, Vec<usize>)>,
    bwd: BTreeMap<i64, (Tensor, Vec<(WorkerId, f64)>)>,
    last: Option<Pass>,
    forwards_done: usize,
    segment_start: i64,
    next_forward: i64,
    /// Stage 0 only: forwarded and not yet backwarded, with the forward time.
    in_flight: BTreeMap<i64, f64>,
}

impl StageRuntime {
    fn new(exec: StageExecutor, resume_from: i64) -> Self {
        let mut rt = StageRuntime {
            exec,
            fwd: BTreeMap::new(),
            bwd: BTreeMap::new(),
            last: None,
            forwards_done: 0,
            segment_start: 0,
            next_forward: 0,
            in_flight: BTreeMap::new(),
        };
        rt.restart(resume_from);
        rt
    }

    fn restart(&mut self, resume_from: i64) {
        self.fwd.clear();
        self.bwd.clear();
        self.last = None;
        self.forwards_done = 0;
        self.segment_start = resume_from;
        self.next_forward = resume_from;
        self.in_flight.clear();
    }
}

/// A layout change prepared but not yet committed.
#[derive(Debug, Clone)]
struct PendingSwap {
    layout: u64,
    roster: Vec<WorkerId>,
    points: PartitionPoints,
    stage: usize,
    weights: Option<WeightSet>,
}

#[derive(Debug, Clone)]
struct FetchJob {
    round: u64,
    start: usize,
    end: usize,
    version: u64,
    have: BTreeMap<usize, LayerParams>,
    waiting: BTreeMap<WorkerId, BTreeSet<usize>>,
}

#[derive(Debug, Clone)]
struct PendingAck {
    target: WorkerId,
    snap: Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProbePurpose {
    Select,
    Fault,
}

#[derive(Debug, Clone)]
struct ProbeRound {
    seq: u64,
    purpose: ProbePurpose,
    expected: Vec<WorkerId>,
    answers: BTreeMap<WorkerId, NodeCondition>,
}

#[derive(Debug, Clone)]
struct PendingCommit {
    coordinator: CommitCoordinator,
    layout: u64,
    resume_from: i64,
    recovery: bool,
    roster: Vec<WorkerId>,
}

#[derive(Debug)]
struct CentralState {
    phase: Phase,
    profile: Option<LayerProfile>,
    detector: FaultDetector,
    probe: Option<ProbeRound>,
    probe_seq: u64,
    commit: Option<PendingCommit>,
    /// Latest mean stage time reported by each worker this segment.
    reports: BTreeMap<WorkerId, f64>,
    capacity: BTreeMap<WorkerId, f64>,
    max_rtt: f64,
    trigger: i64,
    recoveries: u32,
    last_checkpoint: Option<u64>,
    /// Generation numbers handed out so far.
    issued: u64,
}

pub struct Node {
    id: WorkerId,
    setup: Arc<NodeSetup>,
    exec: Box<dyn ExecutionClock>,
    generation: u64,
    layout: u64,
    roster: Vec<WorkerId>,
    points: Option<PartitionPoints>,
    state: TrainingState,
    rt: Option<StageRuntime>,
    replicas: ReplicaStore,
    frozen: bool,
    buffered: Vec<Message>,
    swap: Option<PendingSwap>,
    fetch: Option<FetchJob>,
    acks: BTreeMap<(u8, u64), PendingAck>,
    central: Option<CentralState>,
}

fn kind_tag(kind: SnapshotKind) -> u8 {
    match kind {
        SnapshotKind::Chain => 0,
        SnapshotKind::Global => 1,
    }
}

impl Node {
    pub fn new_central(setup: Arc<NodeSetup>, exec: Box<dyn ExecutionClock>) -> Self {
        let mut node = Self::new_inner(setup.central, setup, exec);
        node.replicas.seed(node.setup.initial_weights.clone());
        node.central = Some(CentralState {
            phase: Phase::Selecting,
            profile: None,
            detector: FaultDetector::default(),
            probe: None,
            probe_seq: 0,
            commit: None,
            reports: BTreeMap::new(),
            capacity: BTreeMap::new(),
            max_rtt: 0.0,
            trigger: 0,
            recoveries: 0,
            last_checkpoint: None,
            issued: 0,
        });
        node
    }

    pub fn new_worker(id: WorkerId, setup: Arc<NodeSetup>, exec: Box<dyn ExecutionClock>) -> Self {
        Self::new_inner(id, setup, exec)
    }

    fn new_inner(id: WorkerId, setup: Arc<NodeSetup>, exec: Box<dyn ExecutionClock>) -> Self {
        Node {
            id,
            state: TrainingState::new(setup.sgd.lr),
            setup,
            exec,
            generation: 0,
            layout: 0,
            roster: Vec::new(),
            points: None,
            rt: None,
            replicas: ReplicaStore::new(),
            frozen: false,
            buffered: Vec::new(),
            swap: None,
            fetch: None,
            acks: BTreeMap::new(),
            central: None,
        }
    }

    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn is_central(&self) -> bool {
        self.central.is_some()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn roster(&self) -> &[WorkerId] {
        &self.roster
    }

    pub fn points(&self) -> Option<&PartitionPoints> {
        self.points.as_ref()
    }

    pub fn stage_index(&self) -> Option<usize> {
        self.roster.iter().position(|w| *w == self.id)
    }

    pub fn executor(&self) -> Option<&StageExecutor> {
        self.rt.as_ref().map(|rt| &rt.exec)
    }

    pub fn replicas(&self) -> &ReplicaStore {
        &self.replicas
    }

    pub fn training_state(&self) -> &TrainingState {
        &self.state
    }

    pub fn phase(&self) -> Option<Phase> {
        self.central.as_ref().map(|c| c.phase)
    }

    pub fn profile(&self) -> Option<&LayerProfile> {
        self.central.as_ref().and_then(|c| c.profile.as_ref())
    }

    /// Capacity estimates by worker, as last computed by the central node.
    pub fn capacities(&self) -> BTreeMap<WorkerId, f64> {
        self.central
            .as_ref()
            .map(|c| c.capacity.clone())
            .unwrap_or_default()
    }

    pub fn recoveries(&self) -> u32 {
        self.central.as_ref().map_or(0, |c| c.recoveries)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_multiplier(&mut self, multiplier: f64) {
        self.exec.set_multiplier(multiplier);
    }

    fn send(&self, to: WorkerId, batch: Option<i64>, payload: Payload) -> Effect {
        Effect::Send(Message::new(self.id, to, batch, payload))
    }

    fn record(&self, t: f64, event: EventKind, batch: i64) -> MetricsRecord {
        MetricsRecord::new(
            t,
            self.stage_index().unwrap_or(0),
            self.id,
            event,
            batch,
            self.generation,
        )
    }

    /// Expected round trip of one batch, before the timeout factor.
    fn expected_rtt(&self) -> f64 {
        let Some(c) = &self.central else { return 0.0 };
        let total = c.profile.as_ref().map_or(0.0, |p| p.total_time());
        let slowest = c.capacity.values().copied().fold(1.0, f64::max);
        let n = self.roster.len().max(1);
        let limit = self.setup.pipeline.limit_for(n) as f64;
        let comm: f64 = match (&c.profile, &self.points) {
            (Some(p), Some(points)) => points
                .all_bounds()
                .iter()
                .take(n.saturating_sub(1))
                .enumerate()
                .map(|(i, (_, end))| {
                    2.0 * p.output_size[*end] as f64
                        / self
                            .setup
                            .bandwidths
                            .get(self.roster[i], self.roster[i + 1])
                })
                .sum(),
            _ => 0.0,
        };
        (limit * total * slowest + comm).max(c.max_rtt)
    }

    /// Seconds a batch may stay in flight before the central node probes.
    pub fn batch_timeout(&self) -> f64 {
        let f = &self.setup.fault;
        f.timeout
            .unwrap_or_else(|| (f.timeout_factor * self.expected_rtt()).max(f.min_timeout))
            .max(1e-9)
    }

    /// Starts the node. Workers wait to be contacted.
    pub fn start(&mut self, now: f64) -> Vec<Effect> {
        if self.central.is_none() {
            return Vec::new();
        }
        let profile = match self.setup.profile.clone() {
            Some(p) => p,
            None => {
                let (x, y) = self.setup.dataset.batch(0);
                let reps = if self.setup.profile_repetitions == 0 {
                    DEFAULT_REPETITIONS
                } else {
                    self.setup.profile_repetitions
                };
                match profile_model(
                    &self.setup.stack,
                    &self.setup.initial_weights,
                    &x,
                    Some(&y),
                    reps,
                    self.exec.as_mut(),
                ) {
                    Ok(p) => p,
                    Err(e) => return vec![Effect::Abort(format!("profiling failed: {e}"))],
                }
            }
        };
        let c = self.central.as_mut().expect("central");
        c.profile = Some(profile);
        c.phase = Phase::Selecting;
        let candidates = self.setup.candidates.clone();
        if candidates.is_empty() {
            return self.finish_selection(now, Vec::new());
        }
        self.start_probe(now, ProbePurpose::Select, candidates)
    }

    fn start_probe(
        &mut self,
        _now: f64,
        purpose: ProbePurpose,
        expected: Vec<WorkerId>,
    ) -> Vec<Effect> {
        let c = self.central.as_mut().expect("central");
        c.probe_seq += 1;
        let seq = c.probe_seq;
        c.probe = Some(ProbeRound {
            seq,
            purpose,
            expected: expected.clone(),
            answers: BTreeMap::new(),
        });
        let mut out: Vec<Effect> = expected
            .iter()
            .map(|w| {
                self.send(
                    *w,
                    None,
                    Payload::Probe {
                        generation: seq,
                        attempt: 1,
                    },
                )
            })
            .collect();
        if expected.is_empty() {
            out.extend(self.finish_probe(_now));
            return out;
        }
        out.push(Effect::Timer {
            delay: self.setup.fault.probe_timeout,
            kind: TimerKind::ProbeTimeout {
                round: seq,
                attempt: 1,
            },
        });
        out
    }

    fn finish_probe(&mut self, now: f64) -> Vec<Effect> {
        let round = self
            .central
            .as_mut()
            .and_then(|c| c.probe.take())
            .expect("probe round");
        match round.purpose {
            ProbePurpose::Select => {
                let chosen = round
                    .expected
                    .iter()
                    .copied()
                    .filter(|w| round.answers.contains_key(w))
                    .collect();
                self.finish_selection(now, chosen)
            }
            ProbePurpose::Fault => {
                let trigger = self.central.as_ref().map_or(0, |c| c.trigger);
                let probe_results = round
                    .expected
                    .iter()
                    .map(|w| {
                        let r = match round.answers.get(w) {
                            Some(NodeCondition::Normal) => ProbeResult::Ok,
                            Some(NodeCondition::Fresh) => ProbeResult::Restarted,
                            None => ProbeResult::Unreachable,
                        };
                        (*w, r)
                    })
                    .collect();
                let report = FaultReport {
                    trigger_batch_id: trigger,
                    probe_results,
                };
                self.recover(now, classify(&report))
            }
        }
    }

    fn finish_selection(&mut self, now: f64, chosen: Vec<WorkerId>) -> Vec<Effect> {
        let layers = self.setup.layers();
        let mut roster = vec![self.id];
        roster.extend(chosen);
        roster.truncate(layers);
        let n = roster.len();
        let profile = self.profile().cloned().expect("profiled");
        let points = match average_partition(&profile, &self.setup.bandwidths.matrix(&roster), n) {
            Ok(p) => p,
            Err(e) => return vec![Effect::Abort(format!("initial partition: {e}"))],
        };
        let start = self.setup.start_batch;
        let mut state = TrainingState::new(self.setup.sgd.lr);
        if start > 0 {
            state.reset_to(start - 1, self.setup.dataset.batches_per_epoch());
        }
        self.state = state.clone();
        let c = self.central.as_mut().expect("central");
        c.issued += 1;
        let gen = c.issued;
        c.phase = Phase::Syncing;
        c.commit = Some(PendingCommit {
            coordinator: CommitCoordinator::new(gen, roster.iter().copied()),
            layout: gen,
            resume_from: start,
            recovery: false,
            roster: roster.clone(),
        });
        let mut out = Vec::new();
        for (i, w) in roster.iter().enumerate() {
            let (s, e) = points.bounds(i);
            let slice = match self.setup.initial_weights.slice(s, e) {
                Ok(ws) => ws,
                Err(err) => return vec![Effect::Abort(format!("initial weights: {err}"))],
            };
            if *w == self.id {
                self.swap = Some(PendingSwap {
                    layout: gen,
                    roster: roster.clone(),
                    points: points.clone(),
                    stage: 0,
                    weights: Some(slice),
                });
                out.push(self.send(
                    self.id,
                    None,
                    Payload::FetchDone {
                        generation: gen,
                        ok: true,
                    },
                ));
            } else {
                out.push(self.send(
                    *w,
                    None,
                    Payload::StateSync {
                        generation: gen,
                        layout: gen,
                        roster: roster.clone(),
                        points: points.points().to_vec(),
                        layers,
                        state: state.clone(),
                        clock: start.max(0) as u64,
                        restore: false,
                        weights: Some(slice),
                    },
                ));
            }
        }
        out.push(Effect::Timer {
            delay: self.recovery_window(),
            kind: TimerKind::RecoveryTimeout { generation: gen },
        });
        let _ = now;
        out
    }

    fn recovery_window(&self) -> f64 {
        let f = &self.setup.fault;
        3.0 * (f.transfer_timeout + f.probe_timeout)
    }

    pub fn handle_message(&mut self, now: f64, msg: Message) -> Vec<Effect> {
        let from = msg.sender;
        match msg.payload {
            Payload::Activation { generation, .. } | Payload::Gradient { generation, .. } => {
                if generation > self.generation {
                    self.buffered.push(msg);
                    return Vec::new();
                }
                if generation < self.generation || self.frozen || self.rt.is_none() {
                    return Vec::new();
                }
                self.accept_data(msg);
                Vec::new()
            }
            Payload::WeightSnapshot(snap) => self.on_snapshot(now, from, snap),
            Payload::SnapshotAck { at_batch, kind, .. } => {
                self.acks.remove(&(kind_tag(kind), at_batch));
                Vec::new()
            }
            Payload::Probe { generation, .. } => {
                if self.rt.is_some() {
                    self.frozen = true;
                }
                let condition = if self.rt.is_some() {
                    NodeCondition::Normal
                } else {
                    NodeCondition::Fresh
                };
                vec![self.send(
                    from,
                    None,
                    Payload::ProbeAck {
                        generation,
                        condition,
                        committed_backward_id: self.state.committed_backward_id,
                    },
                )]
            }
            Payload::ProbeAck {
                generation,
                condition,
                ..
            } => self.on_probe_ack(now, from, generation, condition),
            Payload::StateSync {
                generation,
                layout,
                roster,
                points,
                layers,
                state,
                restore,
                weights,
                ..
            } => self.on_state_sync(
                from, generation, layout, roster, points, layers, state, restore, weights,
            ),
            Payload::Repartition {
                generation,
                points,
                roster,
                prev_points,
                prev_roster,
                failed_index,
            } => self.on_repartition(
                from,
                generation,
                points,
                roster,
                prev_points,
                prev_roster,
                failed_index,
            ),
            Payload::WeightFetch { generation, layers } => {
                self.serve_fetch(from, generation, &layers)
            }
            Payload::WeightFetchAck {
                generation,
                ok,
                layers,
            } => self.on_fetch_ack(from, generation, ok, layers),
            Payload::FetchDone { generation, ok } => self.on_fetch_done(now, from, generation, ok),
            Payload::Commit {
                generation,
                layout,
                resume_from,
                recovery,
                ..
            } => self.apply_commit(now, generation, layout, resume_from, recovery),
            Payload::BandwidthProbe { reply: false, .. } => vec![self.send(
                from,
                None,
                Payload::BandwidthProbe {
                    reply: true,
                    data: Vec::new(),
                },
            )],
            Payload::BandwidthProbe { reply: true, .. } => Vec::new(),
        }
    }

    fn accept_data(&mut self, msg: Message) {
        let rt = self.rt.as_mut().expect("initialized");
        match msg.payload {
            Payload::Activation {
                meta,
                tensor,
                labels,
                ..
            } => {
                if meta.batch_id >= rt.next_forward {
                    rt.fwd.insert(meta.batch_id, (meta, tensor, labels));
                }
            }
            Payload::Gradient {
                tensor, reports, ..
            } => {
                if let Some(b) = msg.batch_id {
                    if rt.exec.stash().contains(b) {
                        rt.bwd.insert(b, (tensor, reports));
                    }
                }
            }
            _ => unreachable!("data messages only"),
        }
    }

    fn on_probe_ack(
        &mut self,
        now: f64,
        from: WorkerId,
        seq: u64,
        condition: NodeCondition,
    ) -> Vec<Effect> {
        let Some(c) = self.central.as_mut() else {
            return Vec::new();
        };
        let Some(round) = c.probe.as_mut() else {
            return Vec::new();
        };
        if round.seq != seq || !round.expected.contains(&from) {
            return Vec::new();
        }
        round.answers.insert(from, condition);
        if round.answers.len() == round.expected.len() {
            return self.finish_probe(now);
        }
        Vec::new()
    }

    #[allow(clippy::too_many_arguments)]
    fn on_state_sync(
        &mut self,
        from: WorkerId,
        round: u64,
        layout: u64,
        roster: Vec<WorkerId>,
        points: Vec<usize>,
        layers: usize,
        state: TrainingState,
        restore: bool,
        weights: Option<WeightSet>,
    ) -> Vec<Effect> {
        let Some(stage) = roster.iter().position(|w| *w == self.id) else {
            return Vec::new();
        };
        let points = match PartitionPoints::new(points, layers) {
            Ok(p) => p,
            Err(_) => {
                return vec![self.send(
                    from,
                    None,
                    Payload::FetchDone {
                        generation: round,
                        ok: false,
                    },
                )]
            }
        };
        self.state = state;
        self.frozen = true;
        let (start, end) = points.bounds(stage);
        let n = roster.len();
        self.swap = Some(PendingSwap {
            layout,
            roster: roster.clone(),
            points,
            stage,
            weights: None,
        });
        if !restore {
            let ok = weights
                .as_ref()
                .is_some_and(|w| w.start() == start && w.end() == end);
            if let Some(s) = self.swap.as_mut() {
                s.weights = weights;
            }
            return vec![self.send(
                from,
                None,
                Payload::FetchDone {
                    generation: round,
                    ok,
                },
            )];
        }
        // chain backup of stage i lives on stage i + 1, the last stage's on the central node
        let source = if stage + 1 < n {
            roster[stage + 1]
        } else {
            roster[0]
        };
        let mut waiting = BTreeMap::new();
        waiting.insert(source, (start..=end).collect::<BTreeSet<_>>());
        self.fetch = Some(FetchJob {
            round,
            start,
            end,
            version: 0,
            have: BTreeMap::new(),
            waiting,
        });
        vec![
            self.send(
                source,
                None,
                Payload::WeightFetch {
                    generation: round,
                    layers: (start..=end).collect(),
                },
            ),
            Effect::Timer {
                delay: self.setup.fault.transfer_timeout,
                kind: TimerKind::FetchTimeout { generation: round },
            },
        ]
    }

    #[allow(clippy::too_many_arguments)]
    fn on_repartition(
        &mut self,
        from: WorkerId,
        round: u64,
        points: Vec<usize>,
        roster: Vec<WorkerId>,
        prev_points: Vec<usize>,
        prev_roster: Vec<WorkerId>,
        failed_index: Option<usize>,
    ) -> Vec<Effect> {
        let layers = self.setup.layers();
        self.frozen = true;
        let fail = |node: &Node| {
            vec![node.send(
                from,
                None,
                Payload::FetchDone {
                    generation: round,
                    ok: false,
                },
            )]
        };
        let Some(i_new) = roster.iter().position(|w| *w == self.id) else {
            // dropped from the roster; hold nothing further
            self.rt = None;
            self.swap = None;
            self.fetch = None;
            return Vec::new();
        };
        let (Ok(p_new), Ok(p_cur)) = (
            PartitionPoints::new(points, layers),
            PartitionPoints::new(prev_points, layers),
        ) else {
            return fail(self);
        };
        let (Ok(cur_list), Ok(new_list)) = (
            WorkerList::from_ids(&prev_roster),
            WorkerList::from_ids(&roster),
        ) else {
            return fail(self);
        };
        let i_cur = if self.rt.is_some() {
            cur_list.index_of(self.id)
        } else {
            None
        };
        let plan: RedistributionPlan = if failed_index.is_some() || prev_roster == roster {
            plan_redistribution(
                &p_new,
                &p_cur,
                failed_index,
                i_cur,
                i_new,
                prev_roster.len() - 1,
            )
        } else {
            plan_fetch_sources(&p_new, &p_cur, &cur_list, &new_list, self.id)
        }
        .unwrap_or_default();
        let (start, end) = p_new.bounds(i_new);
        let version = self.rt.as_ref().map_or(0, |rt| rt.exec.current().version());
        self.swap = Some(PendingSwap {
            layout: round,
            roster: roster.clone(),
            points: p_new,
            stage: i_new,
            weights: None,
        });
        let mut job = FetchJob {
            round,
            start,
            end,
            version,
            have: BTreeMap::new(),
            waiting: BTreeMap::new(),
        };
        let mut missing = Vec::new();
        for l in &plan.l_local {
            match self.local_layer(*l) {
                Some(p) => {
                    job.have.insert(*l, p);
                }
                None => missing.push(*l),
            }
        }
        for (target_index, ls) in &plan.m_need {
            let target = roster[*target_index];
            if target == self.id {
                for l in ls {
                    match self.local_layer(*l) {
                        Some(p) => {
                            job.have.insert(*l, p);
                        }
                        None => missing.push(*l),
                    }
                }
            } else {
                job.waiting
                    .entry(target)
                    .or_default()
                    .extend(ls.iter().copied());
            }
        }
        if !missing.is_empty() {
            if self.id == self.setup.central {
                self.fetch = None;
                return vec![Effect::Abort(format!(
                    "layers {missing:?} unavailable on any node"
                ))];
            }
            job.waiting
                .entry(self.setup.central)
                .or_default()
                .extend(missing);
        }
        self.fetch = Some(job);
        let mut out = Vec::new();
        let requests: Vec<(WorkerId, Vec<usize>)> = self
            .fetch
            .as_ref()
            .expect("job")
            .waiting
            .iter()
            .map(|(w, ls)| (*w, ls.iter().copied().collect()))
            .collect();
        for (w, ls) in requests {
            out.push(self.send(
                w,
                None,
                Payload::WeightFetch {
                    generation: round,
                    layers: ls,
                },
            ));
        }
        out.extend(self.try_finish_fetch(from));
        if self.fetch.is_some() {
            out.push(Effect::Timer {
                delay: self.setup.fault.transfer_timeout,
                kind: TimerKind::FetchTimeout { generation: round },
            });
        }
        out
    }

    /// A layer from this node's live weights, else from its backups.
    fn local_layer(&self, l: usize) -> Option<LayerParams> {
        if let Some(rt) = &self.rt {
            if let Some(p) = rt.exec.current().layer(l) {
                return Some(p.clone());
            }
        }
        self.replicas.layer_params(l).ok()
    }

    fn serve_fetch(&self, from: WorkerId, round: u64, layers: &[usize]) -> Vec<Effect> {
        let found: Vec<(usize, LayerParams)> = layers
            .iter()
            .filter_map(|l| self.local_layer(*l).map(|p| (*l, p)))
            .collect();
        let ok = found.len() == layers.len();
        vec![self.send(
            from,
            None,
            Payload::WeightFetchAck {
                generation: round,
                ok,
                layers: found,
            },
        )]
    }

    fn on_fetch_ack(
        &mut self,
        from: WorkerId,
        round: u64,
        _ok: bool,
        layers: Vec<(usize, LayerParams)>,
    ) -> Vec<Effect> {
        let central = self.setup.central;
        let Some(job) = self.fetch.as_mut() else {
            return Vec::new();
        };
        if job.round != round {
            return Vec::new();
        }
        let Some(wanted) = job.waiting.remove(&from) else {
            return Vec::new();
        };
        for (l, p) in layers {
            if wanted.contains(&l) {
                job.have.insert(l, p);
            }
        }
        let mut missing: Vec<usize> = wanted
            .into_iter()
            .filter(|l| !job.have.contains_key(l))
            .collect();
        if self.id == central && !missing.is_empty() {
            // the central node falls back on its own global backups
            let local: Vec<(usize, LayerParams)> = missing
                .iter()
                .filter_map(|l| self.local_layer(*l).map(|p| (*l, p)))
                .collect();
            let job = self.fetch.as_mut().expect("job");
            for (l, p) in local {
                job.have.insert(l, p);
            }
            missing.retain(|l| !job.have.contains_key(l));
        }
        let job = self.fetch.as_mut().expect("job");
        let mut out = Vec::new();
        if !missing.is_empty() {
            if from == central || self.id == central {
                self.fetch = None;
                return vec![self.send(
                    central,
                    None,
                    Payload::FetchDone {
                        generation: round,
                        ok: false,
                    },
                )];
            }
            job.waiting
                .entry(central)
                .or_default()
                .extend(missing.iter().copied());
            out.push(self.send(
                central,
                None,
                Payload::WeightFetch {
                    generation: round,
                    layers: missing,
                },
            ));
        }
        out.extend(self.try_finish_fetch(central));
        out
    }

    fn try_finish_fetch(&mut self, report_to: WorkerId) -> Vec<Effect> {
        let Some(job) = &self.fetch else {
            return Vec::new();
        };
        if !job.waiting.is_empty() {
            return Vec::new();
        }
        let job = self.fetch.take().expect("job");
        let ok = match WeightSet::assemble(job.version, job.start, job.end, job.have) {
            Ok(ws) => {
                if let Some(s) = self.swap.as_mut() {
                    s.weights = Some(ws);
                }
                true
            }
            Err(_) => false,
        };
        vec![self.send(
            report_to,
            None,
            Payload::FetchDone {
                generation: job.round,
                ok,
            },
        )]
    }

    fn on_fetch_done(&mut self, now: f64, from: WorkerId, round: u64, ok: bool) -> Vec<Effect> {
        let Some(c) = self.central.as_mut() else {
            return Vec::new();
        };
        let Some(pending) = c.commit.as_mut() else {
            return Vec::new();
        };
        match pending.coordinator.ack(from, round, ok) {
            CommitDecision::Pending => Vec::new(),
            CommitDecision::Failed(w) => {
                let mut out = vec![Effect::Log(
                    self.record(
                        now,
                        EventKind::Fault,
                        self.central.as_ref().map_or(0, |c| c.trigger),
                    )
                    .detail(format!("transfer failed on worker {w}")),
                )];
                out.extend(self.retry_recovery(now));
                out
            }
            CommitDecision::Ready => self.release_commit(now),
        }
    }

    fn release_commit(&mut self, now: f64) -> Vec<Effect> {
        let c = self.central.as_mut().expect("central");
        let pending = c.commit.take().expect("pending commit");
        let gen = pending.coordinator.generation;
        let mut out = Vec::new();
        for w in &pending.roster {
            if *w != self.id {
                out.push(self.send(
                    *w,
                    None,
                    Payload::Commit {
                        generation: gen,
                        layout: pending.layout,
                        resume_from: pending.resume_from,
                        reset: true,
                        recovery: pending.recovery,
                    },
                ));
            }
        }
        out.extend(self.apply_commit(
            now,
            gen,
            pending.layout,
            pending.resume_from,
            pending.recovery,
        ));
        let c = self.central.as_mut().expect("central");
        c.phase = Phase::Training;
        c.detector.recovered();
        c.reports.clear();
        self.state.status = Status::Normal;
        out
    }

    fn apply_commit(
        &mut self,
        now: f64,
        gen: u64,
        layout: u64,
        resume_from: i64,
        recovery: bool,
    ) -> Vec<Effect> {
        if gen <= self.generation {
            return Vec::new();
        }
        let first = self.generation == 0;
        let swap = self
            .swap
            .take()
            .filter(|s| s.layout == layout && s.weights.is_some());
        let clock = resume_from.max(0) as u64;
        if let Some(s) = swap {
            let n = s.roster.len();
            let weights = s.weights.expect("filtered");
            match self.rt.as_mut() {
                Some(rt) => {
                    rt.exec.reset(clock, s.stage, n, Some(weights));
                    rt.restart(resume_from);
                }
                None => {
                    let exec = StageExecutor::new(
                        self.setup.stack.clone(),
                        s.stage,
                        n,
                        weights,
                        clock,
                        self.setup.sgd,
                        &self.setup.pipeline,
                    );
                    self.rt = Some(StageRuntime::new(exec, resume_from));
                }
            }
            self.roster = s.roster;
            self.points = Some(s.points);
            self.layout = s.layout;
        } else if layout != self.layout {
            // the layout in force was never installed here; sit this generation out
            self.generation = gen;
            self.rt = None;
            self.fetch = None;
            self.buffered.clear();
            return Vec::new();
        } else if let Some(rt) = self.rt.as_mut() {
            let stage = self.roster.iter().position(|w| *w == self.id).unwrap_or(0);
            rt.exec.reset(clock, stage, self.roster.len(), None);
            rt.restart(resume_from);
        } else {
            self.generation = gen;
            return Vec::new();
        }
        self.generation = gen;
        self.fetch = None;
        self.frozen = false;
        let bpe = self.setup.dataset.batches_per_epoch();
        if first {
            self.state.committed_forward_id = resume_from - 1;
            self.state.committed_backward_id = resume_from - 1;
            self.state.batch_number = resume_from;
        } else {
            self.state.reset_to(resume_from, bpe);
        }
        let rt = self.rt.as_ref().expect("installed");
        let points = self.points.as_ref().expect("installed");
        let event = if recovery {
            EventKind::Recover
        } else {
            EventKind::Repart
        };
        let mut rec = self
            .record(now, event, resume_from)
            .version(rt.exec.current().version())
            .layers(rt.exec.start(), rt.exec.end())
            .points(points.points())
            .count(self.setup.layers() as u64);
        if first {
            rec = rec.detail("initial");
        }
        let mut out = vec![Effect::Log(rec)];
        let buffered = std::mem::take(&mut self.buffered);
        for m in buffered {
            match m.payload.generation() {
                Some(g) if g == self.generation => out.extend(self.handle_message(now, m)),
                Some(g) if g > self.generation => self.buffered.push(m),
                _ => {}
            }
        }
        out
    }

    fn on_snapshot(&mut self, now: f64, from: WorkerId, snap: Snapshot) -> Vec<Effect> {
        let ack = self.send(
            from,
            None,
            Payload::SnapshotAck {
                origin_stage: snap.origin_stage,
                at_batch: snap.at_batch,
                kind: snap.kind,
            },
        );
        let mut out = vec![ack];
        out.extend(self.store_snapshot(now, snap));
        out
    }

    fn store_snapshot(&mut self, _now: f64, snap: Snapshot) -> Vec<Effect> {
        let global = snap.kind == SnapshotKind::Global;
        let at = snap.at_batch;
        self.replicas.store(snap);
        if !global || !self.setup.replication.checkpoint {
            return Vec::new();
        }
        let Some(c) = self.central.as_mut() else {
            return Vec::new();
        };
        if c.last_checkpoint.is_some_and(|l| l >= at) {
            return Vec::new();
        }
        match self.replicas.complete_round(at, self.setup.layers()) {
            Some(snaps) => {
                c.last_checkpoint = Some(at);
                vec![Effect::Checkpoint {
                    at_batch: at,
                    bytes: encode_checkpoint(&snaps),
                }]
            }
            None => Vec::new(),
        }
    }

    pub fn handle_timer(&mut self, now: f64, timer: TimerKind) -> Vec<Effect> {
        match timer {
            TimerKind::ProbeTimeout { round, attempt } => {
                let Some(c) = self.central.as_ref() else {
                    return Vec::new();
                };
                let Some(probe) = c.probe.as_ref().filter(|p| p.seq == round) else {
                    return Vec::new();
                };
                if attempt >= 2 {
                    return self.finish_probe(now);
                }
                let silent: Vec<WorkerId> = probe
                    .expected
                    .iter()
                    .copied()
                    .filter(|w| !probe.answers.contains_key(w))
                    .collect();
                let mut out: Vec<Effect> = silent
                    .iter()
                    .map(|w| {
                        self.send(
                            *w,
                            None,
                            Payload::Probe {
                                generation: round,
                                attempt: 2,
                            },
                        )
                    })
                    .collect();
                out.push(Effect::Timer {
                    delay: self.setup.fault.probe_timeout,
                    kind: TimerKind::ProbeTimeout { round, attempt: 2 },
                });
                out
            }
            TimerKind::BatchTimeout { batch, generation } => {
                self.on_batch_timeout(now, batch, generation)
            }
            TimerKind::SnapshotAck {
                at_batch,
                kind,
                attempt,
            } => {
                let key = (kind_tag(kind), at_batch);
                let Some(p) = self.acks.get(&key) else {
                    return Vec::new();
                };
                if attempt >= 2 {
                    let p = self.acks.remove(&key).expect("present");
                    let rec = self
                        .record(now, EventKind::Repl, at_batch as i64)
                        .version(p.snap.weights.version())
                        .layers(p.snap.weights.start(), p.snap.weights.end())
                        .detail(format!("skipped {:?} to {}", kind, p.target).to_lowercase());
                    return vec![Effect::Log(rec)];
                }
                let resend = self.send(
                    p.target,
                    Some(at_batch as i64),
                    Payload::WeightSnapshot(p.snap.clone()),
                );
                vec![
                    resend,
                    Effect::Timer {
                        delay: self.setup.fault.transfer_timeout,
                        kind: TimerKind::SnapshotAck {
                            at_batch,
                            kind,
                            attempt: attempt + 1,
                        },
                    },
                ]
            }
            TimerKind::FetchTimeout { generation } => self.on_fetch_timeout(generation),
            TimerKind::RecoveryTimeout { generation } => {
                let stuck = self
                    .central
                    .as_ref()
                    .and_then(|c| c.commit.as_ref())
                    .is_some_and(|p| p.coordinator.generation == generation);
                if stuck {
                    self.retry_recovery(now)
                } else {
                    Vec::new()
                }
            }
        }
    }

    fn on_fetch_timeout(&mut self, round: u64) -> Vec<Effect> {
        let central = self.setup.central;
        let Some(job) = self.fetch.as_mut() else {
            return Vec::new();
        };
        if job.round != round {
            return Vec::new();
        }
        let mut retry = BTreeSet::new();
        let mut give_up = false;
        for (w, ls) in std::mem::take(&mut job.waiting) {
            if w == central || self.id == central {
                give_up = true;
            }
            retry.extend(ls);
        }
        if give_up {
            self.fetch = None;
            return vec![self.send(
                central,
                None,
                Payload::FetchDone {
                    generation: round,
                    ok: false,
                },
            )];
        }
        job.waiting.insert(central, retry.clone());
        vec![
            self.send(
                central,
                None,
                Payload::WeightFetch {
                    generation: round,
                    layers: retry.into_iter().collect(),
                },
            ),
            Effect::Timer {
                delay: self.setup.fault.transfer_timeout,
                kind: TimerKind::FetchTimeout { generation: round },
            },
        ]
    }

    fn on_batch_timeout(&mut self, now: f64, batch: i64, generation: u64) -> Vec<Effect> {
        if generation != self.generation {
            return Vec::new();
        }
        let timeout = self.batch_timeout();
        let Some(c) = self.central.as_ref() else {
            return Vec::new();
        };
        if c.phase != Phase::Training && c.phase != Phase::Repartitioning {
            return Vec::new();
        }
        let Some(rt) = self.rt.as_ref() else {
            return Vec::new();
        };
        let Some(sent) = rt.in_flight.get(&batch).copied() else {
            return Vec::new();
        };
        let elapsed = now - sent;
        if elapsed + 1e-12 < timeout {
            // the expected round trip grew since this timer was armed
            return vec![Effect::Timer {
                delay: timeout - elapsed,
                kind: TimerKind::BatchTimeout { batch, generation },
            }];
        }
        let trigger = *rt.in_flight.keys().next().expect("batch in flight");
        let c = self.central.as_mut().expect("central");
        if !c.detector.on_timeout(true) {
            return Vec::new();
        }
        c.trigger = trigger;
        c.phase = Phase::Recovering;
        c.recoveries += 1;
        c.commit = None;
        self.frozen = true;
        self.state.status = Status::Recovering;
        let mut out = vec![Effect::Log(
            self.record(now, EventKind::Fault, trigger)
                .duration(elapsed)
                .detail(format!("batch {batch} timed out")),
        )];
        out.extend(self.probe_for_recovery(now));
        out
    }

    fn probe_for_recovery(&mut self, now: f64) -> Vec<Effect> {
        let c = self.central.as_ref().expect("central");
        if c.recoveries > self.setup.fault.max_recoveries {
            return vec![Effect::Abort(format!(
                "gave up after {} recoveries",
                c.recoveries - 1
            ))];
        }
        let workers: Vec<WorkerId> = self
            .roster
            .iter()
            .copied()
            .filter(|w| *w != self.id)
            .collect();
        self.start_probe(now, ProbePurpose::Fault, workers)
    }

    fn retry_recovery(&mut self, now: f64) -> Vec<Effect> {
        let c = self.central.as_mut().expect("central");
        c.commit = None;
        c.recoveries += 1;
        c.phase = Phase::Recovering;
        self.swap = None;
        self.fetch = None;
        self.frozen = true;
        if self.generation == 0 {
            // initial sync failed: select again from scratch
            let candidates = self.setup.candidates.clone();
            return self.start_probe(now, ProbePurpose::Select, candidates);
        }
        self.probe_for_recovery(now)
    }

    fn next_generation(&mut self) -> u64 {
        let c = self.central.as_mut().expect("central");
        c.issued = c.issued.max(self.generation) + 1;
        c.issued
    }

    fn recover(&mut self, now: f64, case: FaultCase) -> Vec<Effect> {
        let trigger = self.central.as_ref().expect("central").trigger;
        match case {
            FaultCase::AllNormal => {
                let gen = self.next_generation();
                let layout = self.layout;
                let c = self.central.as_mut().expect("central");
                c.commit = Some(PendingCommit {
                    coordinator: CommitCoordinator::new(gen, []),
                    layout,
                    resume_from: trigger,
                    recovery: true,
                    roster: self.roster.clone(),
                });
                self.release_commit(now)
            }
            FaultCase::Restarted(fresh) => {
                let gen = self.next_generation();
                let layout = self.layout;
                let points = self.points.clone().expect("layout");
                let mut state = self.state.clone();
                state.reset_to(trigger, self.setup.dataset.batches_per_epoch());
                let c = self.central.as_mut().expect("central");
                c.commit = Some(PendingCommit {
                    coordinator: CommitCoordinator::new(gen, fresh.iter().copied()),
                    layout,
                    resume_from: trigger,
                    recovery: true,
                    roster: self.roster.clone(),
                });
                let mut out: Vec<Effect> = fresh
                    .iter()
                    .map(|w| {
                        self.send(
                            *w,
                            None,
                            Payload::StateSync {
                                generation: gen,
                                layout,
                                roster: self.roster.clone(),
                                points: points.points().to_vec(),
                                layers: self.setup.layers(),
                                state: state.clone(),
                                clock: trigger.max(0) as u64,
                                restore: true,
                                weights: None,
                            },
                        )
                    })
                    .collect();
                out.push(Effect::Timer {
                    delay: self.recovery_window(),
                    kind: TimerKind::RecoveryTimeout { generation: gen },
                });
                out
            }
            FaultCase::Unreachable(failed) => {
                let failed_idx: Vec<usize> = failed
                    .iter()
                    .filter_map(|w| self.roster.iter().position(|r| r == w))
                    .collect();
                let cur = WorkerList::from_ids(&self.roster).expect("valid roster");
                let new_list = match update_worker_list(&cur, &failed_idx) {
                    Ok(l) => l,
                    Err(e) => return vec![Effect::Abort(e.to_string())],
                };
                let new_roster = new_list.ids();
                let p_cur = self.points.clone().expect("layout");
                let points = match self.setup.fault.strategy {
                    _ if new_roster.len() == 1 => PartitionPoints::single(self.setup.layers()),
                    RecoveryStrategy::SuccessorAbsorbs => {
                        match successor_absorbs(&p_cur, &failed_idx) {
                            Ok(p) => p,
                            Err(e) => return vec![Effect::Abort(e.to_string())],
                        }
                    }
                    RecoveryStrategy::Redistribute => {
                        let c = self.central.as_ref().expect("central");
                        let caps: Vec<f64> = new_roster
                            .iter()
                            .enumerate()
                            .map(|(i, w)| {
                                if i == 0 {
                                    1.0
                                } else {
                                    c.capacity.get(w).copied().unwrap_or(1.0)
                                }
                            })
                            .collect();
                        let profile = c.profile.as_ref().expect("profiled");
                        let caps = CapacityEstimate::new(caps)
                            .unwrap_or_else(|_| CapacityEstimate::uniform(new_roster.len()));
                        match optimal_partition(
                            profile,
                            &caps,
                            &self.setup.bandwidths.matrix(&new_roster),
                            new_roster.len(),
                        ) {
                            Ok((p, _)) => p,
                            Err(e) => return vec![Effect::Abort(e.to_string())],
                        }
                    }
                };
                let single = (failed_idx.len() == 1).then(|| failed_idx[0]);
                self.begin_layout_change(now, new_roster, points, single, trigger, true)
            }
        }
    }

    /// Sends the new layout to every member and starts the central node's own fetch.
    fn begin_layout_change(
        &mut self,
        now: f64,
        roster: Vec<WorkerId>,
        points: PartitionPoints,
        failed_index: Option<usize>,
        resume_from: i64,
        recovery: bool,
    ) -> Vec<Effect> {
        let gen = self.next_generation();
        let prev_points = self.points.clone().expect("layout");
        let prev_roster = self.roster.clone();
        let c = self.central.as_mut().expect("central");
        c.commit = Some(PendingCommit {
            coordinator: CommitCoordinator::new(gen, roster.iter().copied()),
            layout: gen,
            resume_from,
            recovery,
            roster: roster.clone(),
        });
        let mut out = Vec::new();
        for w in &roster {
            if *w != self.id {
                out.push(self.send(
                    *w,
                    None,
                    Payload::Repartition {
                        generation: gen,
                        points: points.points().to_vec(),
                        roster: roster.clone(),
                        prev_points: prev_points.points().to_vec(),
                        prev_roster: prev_roster.clone(),
                        failed_index,
                    },
                ));
            }
        }
        out.extend(self.on_repartition(
            self.id,
            gen,
            points.points().to_vec(),
            roster,
            prev_points.points().to_vec(),
            prev_roster,
            failed_index,
        ));
        out.push(Effect::Timer {
            delay: self.recovery_window(),
            kind: TimerKind::RecoveryTimeout { generation: gen },
        });
        let _ = now;
        out
    }

    /// Next compute step, if the stage has one ready.
    pub fn next_work(&mut self, now: f64) -> Result<Option<Work>, Error> {
        if self.frozen || self.generation == 0 {
            return Ok(None);
        }
        if let Some(c) = &self.central {
            if c.phase != Phase::Training {
                return Ok(None);
            }
        }
        let Some(stage) = self.stage_index() else {
            return Ok(None);
        };
        let n = self.roster.len();
        let total = self.setup.total_batches;
        let cfg = &self.setup.pipeline;
        let limit = cfg.limit_for(n);
        let Some(rt) = self.rt.as_mut() else {
            return Ok(None);
        };
        let closed = cfg.forwards_closed(rt.next_forward, rt.segment_start, total, n);
        let forward_ready = if closed {
            None
        } else if stage == 0 {
            (rt.in_flight.len() < limit).then_some(rt.next_forward)
        } else {
            rt.fwd.keys().next().copied()
        };
        let input = ScheduleInput {
            warmup: warmup_for(stage, n, limit),
            forwards_done: rt.forwards_done,
            last: rt.last,
            forward_ready,
            backward_ready: rt.bwd.keys().next().copied(),
            forwards_closed: closed,
        };
        match schedule_next(&input) {
            Action::Wait => Ok(None),
            Action::Forward(b) => self.run_forward(now, stage, n, limit, b).map(Some),
            Action::Backward(b) => self.run_backward(now, stage, n, limit, b).map(Some),
        }
    }

    fn run_forward(
        &mut self,
        now: f64,
        stage: usize,
        n: usize,
        limit: usize,
        b: i64,
    ) -> Result<Work, Error> {
        let last_stage = stage + 1 == n;
        let (mut meta, x, labels) = if stage == 0 {
            let (x, y) = self.setup.dataset.batch(b);
            (BatchMeta::new(b), x, y)
        } else {
            self.rt
                .as_mut()
                .expect("rt")
                .fwd
                .remove(&b)
                .expect("queued")
        };
        let rt = self.rt.as_mut().expect("rt");
        let out = rt
            .exec
            .forward_batch(
                &mut meta,
                &x,
                last_stage.then_some(labels.as_slice()),
                self.exec.as_mut(),
            )
            .map_err(Error::from)?;
        rt.next_forward = b + 1;
        rt.forwards_done += 1;
        rt.last = Some(Pass::Forward);
        let (start, end) = (rt.exec.start(), rt.exec.end());
        let mut effects = Vec::new();
        let mut rec = self
            .record(now, EventKind::F, b)
            .version(out.version)
            .duration(out.duration)
            .pinned(meta.pinned)
            .layers(start, end)
            .loss(out.loss);
        if stage == 0 {
            rec = rec.limit(limit);
            self.state.committed_forward_id = b;
            self.state.batch_number = b;
        }
        effects.push(Effect::Log(rec));
        if last_stage {
            let rt = self.rt.as_mut().expect("rt");
            rt.bwd.insert(b, (Tensor::scalar(1.0), Vec::new()));
        } else {
            effects.push(self.send(
                self.roster[stage + 1],
                Some(b),
                Payload::Activation {
                    generation: self.generation,
                    meta,
                    tensor: out.output,
                    labels,
                },
            ));
        }
        if stage == 0 {
            self.rt.as_mut().expect("rt").in_flight.insert(b, now);
            effects.push(Effect::Timer {
                delay: self.batch_timeout(),
                kind: TimerKind::BatchTimeout {
                    batch: b,
                    generation: self.generation,
                },
            });
        }
        Ok(Work {
            duration: out.duration,
            effects,
            pass: Pass::Forward,
            batch: b,
            stage,
            last_stage,
        })
    }

    fn run_backward(
        &mut self,
        now: f64,
        stage: usize,
        n: usize,
        limit: usize,
        b: i64,
    ) -> Result<Work, Error> {
        let last_stage = stage + 1 == n;
        let rt = self.rt.as_mut().expect("rt");
        let (g, mut reports) = rt.bwd.remove(&b).expect("queued");
        let out = rt
            .exec
            .backward_batch(b, &g, self.exec.as_mut())
            .map_err(Error::from)?;
        rt.last = Some(Pass::Backward);
        let clock = rt.exec.clock();
        let current = rt.exec.current().clone();
        let mean = rt.exec.mean_stage_time();
        let (start, end) = (rt.exec.start(), rt.exec.end());
        let mut effects = Vec::new();
        let mut rec = self
            .record(now, EventKind::B, b)
            .version(out.version)
            .duration(out.duration)
            .layers(start, end);
        if stage == 0 {
            rec = rec.limit(limit);
        }
        effects.push(Effect::Log(rec));
        if let Some(agg) = &out.aggregated {
            let versions: Vec<String> =
                agg.inputs.iter().map(|w| w.version().to_string()).collect();
            effects.push(Effect::Log(
                self.record(now, EventKind::Agg, b)
                    .version(agg.result.version())
                    .layers(start, end)
                    .count(agg.inputs.len() as u64)
                    .detail(format!(
                        "clock {} versions {}",
                        agg.clock,
                        versions.join(",")
                    )),
            ));
        }
        if stage > 0 {
            if let Some(t) = mean {
                reports.push((self.id, t));
            }
            effects.push(
                self.send(
                    self.roster[stage - 1],
                    Some(b),
                    Payload::Gradient {
                        generation: self.generation,
                        tensor: out
                            .downstream
                            .expect("non-first stage has a downstream gradient"),
                        reports: std::mem::take(&mut reports),
                    },
                ),
            );
        }
        effects.extend(self.replicate(now, stage, n, clock, current));
        if stage == 0 {
            let rt = self.rt.as_mut().expect("rt");
            let sent = rt.in_flight.remove(&b).unwrap_or(now);
            self.state.committed_backward_id = b;
            let c = self.central.as_mut().expect("stage 0 is central");
            c.max_rtt = c.max_rtt.max(now - sent);
            c.reports.extend(reports);
            effects.extend(self.maybe_end_segment(now));
        }
        Ok(Work {
            duration: out.duration,
            effects,
            pass: Pass::Backward,
            batch: b,
            stage,
            last_stage,
        })
    }

    fn replicate(
        &mut self,
        now: f64,
        stage: usize,
        n: usize,
        clock: u64,
        current: Arc<WeightSet>,
    ) -> Vec<Effect> {
        let policy = self.setup.replication.clone();
        let mut out = Vec::new();
        let mut jobs = Vec::new();
        if policy.chain_due(clock) {
            let target = if stage + 1 < n {
                self.roster[stage + 1]
            } else {
                self.roster[0]
            };
            jobs.push((SnapshotKind::Chain, target));
        }
        if policy.global_due(clock) {
            jobs.push((SnapshotKind::Global, self.setup.central));
        }
        for (kind, target) in jobs {
            let snap = Snapshot {
                origin_stage: stage,
                at_batch: clock,
                kind,
                weights: current.clone(),
            };
            out.push(Effect::Log(
                self.record(now, EventKind::Repl, clock as i64)
                    .version(current.version())
                    .layers(current.start(), current.end())
                    .detail(format!(
                        "{} to {target}",
                        if kind == SnapshotKind::Chain {
                            "chain"
                        } else {
                            "global"
                        }
                    )),
            ));
            if target == self.id {
                out.extend(self.store_snapshot(now, snap));
                continue;
            }
            self.acks.insert(
                (kind_tag(kind), clock),
                PendingAck {
                    target,
                    snap: snap.clone(),
                },
            );
            out.push(self.send(target, Some(clock as i64), Payload::WeightSnapshot(snap)));
            out.push(Effect::Timer {
                delay: self.setup.fault.transfer_timeout,
                kind: TimerKind::SnapshotAck {
                    at_batch: clock,
                    kind,
                    attempt: 1,
                },
            });
        }
        out
    }

    /// Called on the central node after each stage-0 backward.
    fn maybe_end_segment(&mut self, now: f64) -> Vec<Effect> {
        let n = self.roster.len();
        let total = self.setup.total_batches;
        let cfg = self.setup.pipeline.clone();
        let rt = self.rt.as_ref().expect("rt");
        if !rt.in_flight.is_empty()
            || !cfg.forwards_closed(rt.next_forward, rt.segment_start, total, n)
        {
            return Vec::new();
        }
        let b = rt.next_forward;
        let c = self.central.as_mut().expect("central");
        if b >= total {
            c.phase = Phase::Done;
            return vec![Effect::Finished];
        }
        let points = self.points.clone().expect("layout");
        let profile = c.profile.clone().expect("profiled");
        let reported: Vec<Option<f64>> = self
            .roster
            .iter()
            .map(|w| c.reports.get(w).copied())
            .collect();
        let caps = match estimate_capacity(&reported, &profile, &points) {
            Ok(caps) => caps,
            Err(e) => return vec![Effect::Abort(format!("capacity estimate: {e}"))],
        };
        for (i, w) in self.roster.iter().enumerate() {
            if reported[i].is_some() || i == 0 {
                c.capacity.insert(*w, caps.get(i));
            }
        }
        let new_points = match optimal_partition(
            &profile,
            &caps,
            &self.setup.bandwidths.matrix(&self.roster),
            n,
        ) {
            Ok((p, _)) => p,
            Err(e) => return vec![Effect::Abort(format!("re-partition: {e}"))],
        };
        c.phase = Phase::Repartitioning;
        self.frozen = true;
        if new_points == points {
            let gen = self.next_generation();
            let c = self.central.as_mut().expect("central");
            c.commit = Some(PendingCommit {
                coordinator: CommitCoordinator::new(gen, []),
                layout: self.layout,
                resume_from: b,
                recovery: false,
                roster: self.roster.clone(),
            });
            return self.release_commit(now);
        }
        let roster = self.roster.clone();
        self.begin_layout_change(now, roster, new_points, None, b, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_matrix_follows_roster_order() {
        let mut t = BandwidthTable::uniform(100.0);
        t.pairs.insert((0, 7), 5.0);
        let m = t.matrix(&[0, 7, 3]);
        assert_eq!(m.as_slice(), &[5.0, 100.0]);
        assert!(t.matrix(&[0]).is_empty());
    }
}
