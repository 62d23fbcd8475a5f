//! Per-stage asynchronous training: the 1F1B scheduler, weight stashing,
//! vertical sync and periodic weight aggregation.
//!
//! Every stage keeps an update clock, the number of backward passes it has
//! completed. `history[c]` is the weight set published when the clock reached
//! `c`. Stage 0 pins each batch to its own clock at forward time; every stage then
//! forwards that batch with `history[pinned]`, which is what makes a batch see one
//! consistent version across the pipeline. Backward reuses the stashed weights of
//! the batch and applies the optimizer step to the current weights.
//!
//! Stage `i` of `n` behaves like `n - i` concurrent trainers. When its clock hits
//! a multiple of `(n - i) * base_interval`, the last `n - i` published versions are
//! averaged into the current weights. The history entry for that clock keeps the
//! pre-aggregation weights, so the aggregate is first visible through the next
//! optimizer step.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::{ExecutionClock, Pass};
use crate::error::PipelineError;
use crate::model::sgd_step;
use crate::model::{
    aggregate_weights, backward_range, forward_range, ActivationRecord, GradientSet, LayerStack,
    SgdConfig, SgdState, WeightSet,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Maximum batches forwarded at stage 0 and not yet backwarded there. 0 means `n`.
    pub in_flight_limit: usize,
    pub aggregation: bool,
    pub aggregation_base_interval: u64,
    pub dynamic_partition: bool,
    /// First re-partition after this many batches.
    pub repartition_warmup: i64,
    /// Later re-partitions at every multiple of this many batches.
    pub repartition_interval: i64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            in_flight_limit: 0,
            aggregation: true,
            aggregation_base_interval: 1,
            dynamic_partition: true,
            repartition_warmup: 10,
            repartition_interval: 100,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.aggregation_base_interval == 0 {
            return Err(PipelineError::Config(
                "aggregation_base_interval must be positive".into(),
            ));
        }
        if self.repartition_warmup <= 0 || self.repartition_interval <= 0 {
            return Err(PipelineError::Config(
                "re-partition schedule must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn limit_for(&self, n: usize) -> usize {
        if self.in_flight_limit == 0 {
            n.max(1)
        } else {
            self.in_flight_limit
        }
    }

    /// Whether the pipeline drains and re-partitions before batch `b`.
    pub fn is_repartition_point(&self, b: i64, n: usize) -> bool {
        self.dynamic_partition
            && n > 1
            && b > 0
            && (b == self.repartition_warmup || b % self.repartition_interval == 0)
    }

    /// Whether no batch numbered `next` may be forwarded in the segment that began at `segment_start`.
    pub fn forwards_closed(&self, next: i64, segment_start: i64, total: i64, n: usize) -> bool {
        next >= total || (next > segment_start && self.is_repartition_point(next, n))
    }
}

/// Forward passes a stage runs before its first backward.
pub fn warmup_for(stage: usize, n: usize, limit: usize) -> usize {
    if stage + 1 >= n {
        1
    } else {
        limit.saturating_sub(stage).clamp(1, limit.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Normal,
    Recovering,
}

impl Status {
    pub fn as_u8(self) -> u8 {
        match self {
            Status::Normal => 0,
            Status::Recovering => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Status::Normal),
            1 => Some(Status::Recovering),
            _ => None,
        }
    }
}

/// Training state variables shared by every node.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub committed_forward_id: i64,
    pub committed_backward_id: i64,
    pub learning_rate: f64,
    pub epoch_number: u64,
    pub batch_number: i64,
    pub status: Status,
}

impl TrainingState {
    pub fn new(learning_rate: f64) -> Self {
        TrainingState {
            committed_forward_id: -1,
            committed_backward_id: -1,
            learning_rate,
            epoch_number: 0,
            batch_number: 0,
            status: Status::Normal,
        }
    }

    /// Both committed ids set to `trigger`; status back to normal.
    pub fn reset_to(&mut self, trigger: i64, batches_per_epoch: i64) {
        self.committed_forward_id = trigger;
        self.committed_backward_id = trigger;
        self.batch_number = trigger;
        self.epoch_number = (trigger.max(0) / batches_per_epoch.max(1)) as u64;
        self.status = Status::Normal;
    }
}

/// Metadata travelling with a batch through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMeta {
    pub batch_id: i64,
    /// Stage-0 update clock when the batch entered the pipeline.
    pub pinned: u64,
    /// Weight version each stage used for the forward pass, in stage order.
    pub versions: Vec<u64>,
}

impl BatchMeta {
    pub fn new(batch_id: i64) -> Self {
        BatchMeta {
            batch_id,
            pinned: 0,
            versions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StashEntry {
    pub pinned: u64,
    pub weights: Arc<WeightSet>,
    /// One record per layer of the stage.
    pub records: Vec<ActivationRecord>,
}

/// Forward-time weights and activations, kept until the batch's backward.
#[derive(Debug, Clone, Default)]
pub struct StashStore {
    entries: BTreeMap<i64, StashEntry>,
}

impl StashStore {
    pub fn insert(&mut self, batch: i64, entry: StashEntry) {
        self.entries.insert(batch, entry);
    }

    pub fn take(&mut self, batch: i64) -> Option<StashEntry> {
        self.entries.remove(&batch)
    }

    pub fn get(&self, batch: i64) -> Option<&StashEntry> {
        self.entries.get(&batch)
    }

    pub fn contains(&self, batch: i64) -> bool {
        self.entries.contains_key(&batch)
    }

    /// Drops every entry for batches `>= from`, returning their ids.
    pub fn evict_from(&mut self, from: i64) -> Vec<i64> {
        let dropped = self.entries.split_off(&from);
        dropped.into_keys().collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn batches(&self) -> impl Iterator<Item = i64> + '_ {
        self.entries.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Forward(i64),
    Backward(i64),
    Wait,
}

/// What the scheduler needs to know about one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleInput {
    pub warmup: usize,
    /// Forward passes since the current segment began.
    pub forwards_done: usize,
    pub last: Option<Pass>,
    /// Next batch that may be forwarded now, already gated by the in-flight limit.
    pub forward_ready: Option<i64>,
    pub backward_ready: Option<i64>,
    /// No further forward will arrive in this segment.
    pub forwards_closed: bool,
}

/// One-forward-one-backward scheduling.
///
/// Warmup runs forwards only; afterwards forward and backward alternate, and
/// once forwards are closed the remaining backwards drain back to back.
pub fn schedule_next(s: &ScheduleInput) -> Action {
    let forward = s.forward_ready.map(Action::Forward);
    let backward = s.backward_ready.map(Action::Backward);
    if s.forwards_closed {
        return backward.unwrap_or(Action::Wait);
    }
    if s.forwards_done < s.warmup {
        return forward.unwrap_or(Action::Wait);
    }
    match s.last {
        Some(Pass::Forward) => backward.unwrap_or(Action::Wait),
        Some(Pass::Backward) | None => forward.unwrap_or(Action::Wait),
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutcome {
    pub output: Tensor,
    pub version: u64,
    pub duration: f64,
    /// Mean loss when this stage holds the loss layer.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregateEvent {
    pub clock: u64,
    pub inputs: Vec<Arc<WeightSet>>,
    pub result: Arc<WeightSet>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutcome {
    /// Gradient for the previous stage; `None` on stage 0.
    pub downstream: Option<Tensor>,
    /// Version the backward ran with, equal to the forward version.
    pub version: u64,
    /// Version of the current weights after the step (and any aggregation).
    pub new_version: u64,
    pub duration: f64,
    pub aggregated: Option<AggregateEvent>,
}

/// Executes one stage's layer range.
#[derive(Debug, Clone)]
pub struct StageExecutor {
    stage: usize,
    stages: usize,
    stack: Arc<LayerStack>,
    current: Arc<WeightSet>,
    history: BTreeMap<u64, Arc<WeightSet>>,
    clock: u64,
    lineage: VecDeque<Arc<WeightSet>>,
    sgd: SgdState,
    sgd_cfg: SgdConfig,
    stash: StashStore,
    aggregation: bool,
    base_interval: u64,
    time_sum: f64,
    time_batches: u64,
}

impl StageExecutor {
    /// A stage owning `weights`' layer range, starting at update clock `clock`.
    pub fn new(
        stack: Arc<LayerStack>,
        stage: usize,
        stages: usize,
        weights: WeightSet,
        clock: u64,
        sgd_cfg: SgdConfig,
        cfg: &PipelineConfig,
    ) -> Self {
        let current = Arc::new(weights);
        let mut history = BTreeMap::new();
        history.insert(clock, current.clone());
        StageExecutor {
            stage,
            stages,
            stack,
            sgd: SgdState::zeros_for(&current),
            current,
            history,
            clock,
            lineage: VecDeque::new(),
            sgd_cfg,
            stash: StashStore::default(),
            aggregation: cfg.aggregation,
            base_interval: cfg.aggregation_base_interval.max(1),
            time_sum: 0.0,
            time_batches: 0,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn start(&self) -> usize {
        self.current.start()
    }

    pub fn end(&self) -> usize {
        self.current.end()
    }

    pub fn is_last(&self) -> bool {
        self.current.end() + 1 == self.stack.len()
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn current(&self) -> &Arc<WeightSet> {
        &self.current
    }

    pub fn history(&self) -> &BTreeMap<u64, Arc<WeightSet>> {
        &self.history
    }

    pub fn stash(&self) -> &StashStore {
        &self.stash
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.sgd_cfg.lr = lr;
    }

    /// Mean forward+backward time per completed batch since the last reset.
    pub fn mean_stage_time(&self) -> Option<f64> {
        (self.time_batches > 0).then(|| self.time_sum / self.time_batches as f64)
    }

    /// Forwards a batch with the pinned weight version. Stage 0 sets the pin.
    pub fn forward_batch(
        &mut self,
        meta: &mut BatchMeta,
        input: &Tensor,
        labels: Option<&[usize]>,
        clock: &mut dyn ExecutionClock,
    ) -> Result<ForwardOutcome, PipelineError> {
        if self.stage == 0 {
            meta.pinned = self.clock;
        }
        let weights =
            self.history
                .get(&meta.pinned)
                .cloned()
                .ok_or(PipelineError::VerticalSync {
                    stage: self.stage,
                    batch: meta.batch_id,
                    pinned: meta.pinned,
                })?;
        let mut x = input.clone();
        let mut records = Vec::with_capacity(weights.params().len());
        let mut duration = 0.0;
        for j in weights.start()..=weights.end() {
            let mut out = None;
            duration += clock.measure(j, Pass::Forward, &mut || {
                out = Some(forward_range(&self.stack, &weights, &x, j, j, labels));
            });
            let (y, rec) = out.expect("forward ran")?;
            records.push(rec);
            x = y;
        }
        let loss = self.is_last().then(|| x.data()[0]);
        let version = weights.version();
        meta.versions.push(version);
        self.stash.insert(
            meta.batch_id,
            StashEntry {
                pinned: meta.pinned,
                weights,
                records,
            },
        );
        // later batches never pin below this one
        self.history = self.history.split_off(&meta.pinned);
        self.time_sum += duration;
        Ok(ForwardOutcome {
            output: x,
            version,
            duration,
            loss,
        })
    }

    /// Backpropagates with the stashed weights and steps the current weights.
    pub fn backward_batch(
        &mut self,
        batch: i64,
        upstream: &Tensor,
        clock: &mut dyn ExecutionClock,
    ) -> Result<BackwardOutcome, PipelineError> {
        let entry = self.stash.take(batch).ok_or(PipelineError::MissingStash {
            stage: self.stage,
            batch,
        })?;
        let weights = entry.weights;
        let mut grads = vec![None; weights.params().len()];
        let mut g = upstream.clone();
        let mut duration = 0.0;
        for j in (weights.start()..=weights.end()).rev() {
            let rec = &entry.records[j - weights.start()];
            let mut out = None;
            duration += clock.measure(j, Pass::Backward, &mut || {
                out = Some(backward_range(&self.stack, &weights, rec, &g));
            });
            let (gs, dx) = out.expect("backward ran")?;
            grads[j - weights.start()] = gs.grads.into_iter().next().flatten();
            g = dx;
        }
        let grads = GradientSet {
            batch_id: batch,
            start: weights.start(),
            grads,
        };
        let next = Arc::new(sgd_step(
            &self.current,
            &grads,
            &mut self.sgd,
            &self.sgd_cfg,
        )?);
        self.clock += 1;
        self.history.insert(self.clock, next.clone());
        self.lineage.push_back(next.clone());
        let keep = self.lineage_width().max(1);
        while self.lineage.len() > keep {
            self.lineage.pop_front();
        }
        self.current = next;
        let aggregated = self.maybe_aggregate()?;
        self.time_sum += duration;
        self.time_batches += 1;
        Ok(BackwardOutcome {
            downstream: (self.stage > 0).then_some(g),
            version: weights.version(),
            new_version: self.current.version(),
            duration,
            aggregated,
        })
    }

    fn lineage_width(&self) -> usize {
        self.stages.saturating_sub(self.stage)
    }

    /// Averages the stage's concurrent lineages when the clock hits the interval.
    pub fn maybe_aggregate(&mut self) -> Result<Option<AggregateEvent>, PipelineError> {
        let k = self.lineage_width();
        if !self.aggregation || k < 2 || !self.clock.is_multiple_of(k as u64 * self.base_interval) {
            return Ok(None);
        }
        if self.lineage.len() < k {
            self.lineage.clear();
            return Ok(None);
        }
        let inputs: Vec<Arc<WeightSet>> = self.lineage.drain(..).collect();
        let result = Arc::new(aggregate_weights(&inputs)?);
        self.current = result.clone();
        Ok(Some(AggregateEvent {
            clock: self.clock,
            inputs,
            result,
        }))
    }

    /// Restarts the stage at `clock`, optionally over a new layer range.
    ///
    /// Stashed batches and lineages are dropped; momentum is kept for layers the
    /// stage still owns.
    pub fn reset(&mut self, clock: u64, stage: usize, stages: usize, weights: Option<WeightSet>) {
        if let Some(w) = weights {
            let w = Arc::new(w);
            self.sgd = self.sgd.rebased(&w);
            self.current = w;
        }
        self.stage = stage;
        self.stages = stages;
        self.clock = clock;
        self.history.clear();
        self.history.insert(clock, self.current.clone());
        self.lineage.clear();
        self.stash.clear();
        self.time_sum = 0.0;
        self.time_batches = 0;
    }
}
