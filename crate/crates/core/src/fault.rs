//! Failure handling on the central node: the worker roster, probe classification,
//! roster updates, the weight redistribution plan and the commit barrier.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::FaultError;
use crate::partitioner::PartitionPoints;

pub type WorkerId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerEntry {
    pub id: WorkerId,
    pub address: String,
}

/// Ordered device roster; position is the stage index and position 0 is the central node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerList {
    entries: Vec<WorkerEntry>,
}

impl WorkerList {
    pub fn new(entries: Vec<WorkerEntry>) -> Result<Self, FaultError> {
        let ids: BTreeSet<WorkerId> = entries.iter().map(|e| e.id).collect();
        if entries.is_empty() || ids.len() != entries.len() {
            return Err(FaultError::InvalidFailure(
                "worker ids must be unique and nonempty".into(),
            ));
        }
        Ok(WorkerList { entries })
    }

    pub fn from_ids(ids: &[WorkerId]) -> Result<Self, FaultError> {
        Self::new(
            ids.iter()
                .map(|id| WorkerEntry {
                    id: *id,
                    address: format!("node-{id}"),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[WorkerEntry] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<WorkerId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn id_at(&self, index: usize) -> WorkerId {
        self.entries[index].id
    }

    pub fn index_of(&self, id: WorkerId) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    pub fn central(&self) -> WorkerId {
        self.entries[0].id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeResult {
    Ok,
    Restarted,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultReport {
    pub trigger_batch_id: i64,
    pub probe_results: BTreeMap<WorkerId, ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultCase {
    /// Every worker answered normally: restart from the trigger batch.
    AllNormal,
    /// Workers that lost their memory but answered.
    Restarted(Vec<WorkerId>),
    /// Workers that did not answer. Restarted workers seen alongside them are included.
    Unreachable(Vec<WorkerId>),
}

pub fn classify(report: &FaultReport) -> FaultCase {
    let unreachable: Vec<WorkerId> = report
        .probe_results
        .iter()
        .filter(|(_, r)| **r != ProbeResult::Ok)
        .map(|(id, _)| *id)
        .collect();
    if report
        .probe_results
        .values()
        .any(|r| *r == ProbeResult::Unreachable)
    {
        return FaultCase::Unreachable(unreachable);
    }
    if unreachable.is_empty() {
        FaultCase::AllNormal
    } else {
        FaultCase::Restarted(unreachable)
    }
}

/// Removes the failed positions from the roster.
///
/// One failure: every index above it moves down by one. Several: the alive
/// workers fill the vacated positions in their original order. Both rules keep
/// the survivors' relative order.
pub fn update_worker_list(list: &WorkerList, failed: &[usize]) -> Result<WorkerList, FaultError> {
    let failed: BTreeSet<usize> = failed.iter().copied().collect();
    if failed.contains(&0) {
        return Err(FaultError::InvalidFailure(
            "the central node cannot be removed".into(),
        ));
    }
    if let Some(bad) = failed.iter().find(|i| **i >= list.len()) {
        return Err(FaultError::InvalidFailure(format!(
            "index {bad} not in a roster of {}",
            list.len()
        )));
    }
    let entries = list
        .entries
        .iter()
        .enumerate()
        .filter(|(i, _)| !failed.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    Ok(WorkerList { entries })
}

/// Where a worker gets each layer of its new stage.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RedistributionPlan {
    /// New roster index of the worker to fetch from, with the layers it provides.
    pub m_need: BTreeMap<usize, Vec<usize>>,
    /// Layers already held locally.
    pub l_local: Vec<usize>,
}

impl RedistributionPlan {
    pub fn layers(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .l_local
            .iter()
            .chain(self.m_need.values().flatten())
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Fetch plan for the worker moving from index `i_cur` under `p_cur` to `i_new`
/// under `p_new`.
///
/// `i_fail` is the single failed index, or `None` for a dynamic re-partition
/// where indices are unchanged. `n` is the index of the last stage under `p_cur`.
/// A layer owned by the failed stage resolves to the index now held by its
/// successor, which keeps the chain backup, or to the central node when the last
/// stage failed. `i_cur` is `None` for a worker that held nothing.
pub fn plan_redistribution(
    p_new: &PartitionPoints,
    p_cur: &PartitionPoints,
    i_fail: Option<usize>,
    i_cur: Option<usize>,
    i_new: usize,
    n: usize,
) -> Result<RedistributionPlan, FaultError> {
    let (ns, ne) = p_new.stage_bounds(i_new, p_new.layers())?;
    let held = match i_cur {
        Some(i) => Some(p_cur.stage_bounds(i, p_cur.layers())?),
        None => None,
    };
    let mut plan = RedistributionPlan::default();
    for l in ns..=ne {
        if held.is_some_and(|(cs, ce)| cs <= l && l <= ce) {
            plan.l_local.push(l);
            continue;
        }
        let mut target = p_cur.stage_of(l);
        if let Some(fail) = i_fail {
            if target > fail {
                target -= 1;
            } else if target == fail && fail == n {
                target = 0;
            }
        }
        plan.m_need.entry(target).or_default().push(l);
    }
    Ok(plan)
}

/// Fetch plan for any set of failures, by worker identity.
///
/// Each missing layer comes from its previous owner if it survived, else from
/// that owner's chain successor if it survived (the central node when the owner
/// was last), else from the central node's global copy.
pub fn plan_fetch_sources(
    p_new: &PartitionPoints,
    p_cur: &PartitionPoints,
    cur_roster: &WorkerList,
    new_roster: &WorkerList,
    me: WorkerId,
) -> Result<RedistributionPlan, FaultError> {
    let i_new = new_roster
        .index_of(me)
        .ok_or_else(|| FaultError::InvalidFailure(format!("worker {me} not in the new roster")))?;
    let (ns, ne) = p_new.stage_bounds(i_new, p_new.layers())?;
    let held = match cur_roster.index_of(me) {
        Some(i) => Some(p_cur.stage_bounds(i, p_cur.layers())?),
        None => None,
    };
    let last = cur_roster.len() - 1;
    let mut plan = RedistributionPlan::default();
    for l in ns..=ne {
        if held.is_some_and(|(cs, ce)| cs <= l && l <= ce) {
            plan.l_local.push(l);
            continue;
        }
        let owner_index = p_cur.stage_of(l);
        let owner = cur_roster.id_at(owner_index);
        let target = if let Some(i) = new_roster.index_of(owner) {
            i
        } else if owner_index == last {
            0
        } else {
            new_roster
                .index_of(cur_roster.id_at(owner_index + 1))
                .unwrap_or(0)
        };
        plan.m_need.entry(target).or_default().push(l);
    }
    Ok(plan)
}

/// Layers one node must hand out for a whole plan, by requesting index.
pub fn layers_to_serve(
    plans: &BTreeMap<usize, RedistributionPlan>,
    server: usize,
) -> BTreeMap<usize, Vec<usize>> {
    plans
        .iter()
        .filter_map(|(req, p)| p.m_need.get(&server).map(|ls| (*req, ls.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitDecision {
    Pending,
    Ready,
    Failed(WorkerId),
}

/// Collects fetch completions; the commit is released only once every expected worker succeeded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitCoordinator {
    pub generation: u64,
    expected: BTreeSet<WorkerId>,
    done: BTreeSet<WorkerId>,
    failed: Option<WorkerId>,
}

impl CommitCoordinator {
    pub fn new(generation: u64, expected: impl IntoIterator<Item = WorkerId>) -> Self {
        CommitCoordinator {
            generation,
            expected: expected.into_iter().collect(),
            done: BTreeSet::new(),
            failed: None,
        }
    }

    pub fn ack(&mut self, worker: WorkerId, generation: u64, ok: bool) -> CommitDecision {
        if generation != self.generation || !self.expected.contains(&worker) {
            return self.decision();
        }
        if ok {
            self.done.insert(worker);
        } else if self.failed.is_none() {
            self.failed = Some(worker);
        }
        self.decision()
    }

    pub fn decision(&self) -> CommitDecision {
        if let Some(w) = self.failed {
            CommitDecision::Failed(w)
        } else if self.done == self.expected {
            CommitDecision::Ready
        } else {
            CommitDecision::Pending
        }
    }

    pub fn waiting_on(&self) -> Vec<WorkerId> {
        self.expected.difference(&self.done).copied().collect()
    }
}

/// Status guard around batch timeouts: only the first expiry while training
/// normally starts a recovery.
#[derive(Debug, Clone, Default)]
pub struct FaultDetector {
    recovering: bool,
    handled: u64,
}

impl FaultDetector {
    pub fn on_timeout(&mut self, outstanding: bool) -> bool {
        if self.recovering || !outstanding {
            return false;
        }
        self.recovering = true;
        self.handled += 1;
        true
    }

    pub fn recovered(&mut self) {
        self.recovering = false;
    }

    pub fn is_recovering(&self) -> bool {
        self.recovering
    }

    /// Recoveries started so far.
    pub fn handled(&self) -> u64 {
        self.handled
    }
}

/// Baseline layout after failures: each failed stage's layers go to its
/// successor, or to its predecessor when it was the last stage. Indices refer to
/// `points`; the result has one stage per survivor.
pub fn successor_absorbs(
    points: &PartitionPoints,
    failed: &[usize],
) -> Result<PartitionPoints, FaultError> {
    let mut failed: Vec<usize> = failed
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if failed.first() == Some(&0) {
        return Err(FaultError::InvalidFailure(
            "the central node cannot be removed".into(),
        ));
    }
    let mut p = points.points().to_vec();
    let mut stages = points.stages();
    if failed.iter().any(|f| *f >= stages) {
        return Err(FaultError::InvalidFailure(format!(
            "failure outside {stages} stages"
        )));
    }
    // highest first so lower indices stay valid
    failed.reverse();
    for f in failed {
        if f + 1 < stages {
            p.remove(f);
        } else {
            p.remove(f - 1);
        }
        stages -= 1;
    }
    PartitionPoints::new(p, points.layers()).map_err(FaultError::Partition)
}
