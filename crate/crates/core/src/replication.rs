//! Chain and global weight backups.
//!
//! Chain: every stage copies its weights to the next worker in the roster and the
//! last stage copies to the central node. Global: every stage copies to the
//! central node, less often. Snapshots are immutable; a newer one for the same
//! origin stage replaces the older one.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ReplicationError, WireError};
use crate::model::{LayerParams, WeightSet};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicationPolicy {
    pub chain_interval: u64,
    pub global_interval: u64,
    /// Write the central node's global map to disk after each complete global round.
    pub checkpoint: bool,
}

impl Default for ReplicationPolicy {
    fn default() -> Self {
        ReplicationPolicy {
            chain_interval: 50,
            global_interval: 100,
            checkpoint: false,
        }
    }
}

impl ReplicationPolicy {
    /// Intervals count a stage's completed backward passes.
    pub fn chain_due(&self, clock: u64) -> bool {
        self.chain_interval > 0 && clock > 0 && clock.is_multiple_of(self.chain_interval)
    }

    pub fn global_due(&self, clock: u64) -> bool {
        self.global_interval > 0 && clock > 0 && clock.is_multiple_of(self.global_interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SnapshotKind {
    Chain,
    Global,
}

/// A stage's weights at a backward-complete boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub origin_stage: usize,
    /// Update clock of the origin stage when the copy was taken.
    pub at_batch: u64,
    pub kind: SnapshotKind,
    pub weights: Arc<WeightSet>,
}

impl Snapshot {
    /// Header `{origin_stage u32, batch_id i64, version u64}`, kind byte, then the weight set.
    pub fn encode(&self, w: &mut Writer) {
        w.u32(self.origin_stage as u32)
            .i64(self.at_batch as i64)
            .u64(self.weights.version())
            .u8(match self.kind {
                SnapshotKind::Chain => 0,
                SnapshotKind::Global => 1,
            })
            .weight_set(&self.weights);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Snapshot, WireError> {
        let origin_stage = r.u32()? as usize;
        let at_batch = r.i64()?;
        let version = r.u64()?;
        let kind = match r.u8()? {
            0 => SnapshotKind::Chain,
            1 => SnapshotKind::Global,
            x => return Err(WireError::Malformed(format!("snapshot kind {x}"))),
        };
        let weights = r.weight_set()?;
        if weights.version() != version || at_batch < 0 {
            return Err(WireError::Malformed(
                "snapshot header disagrees with body".into(),
            ));
        }
        Ok(Snapshot {
            origin_stage,
            at_batch: at_batch as u64,
            kind,
            weights: Arc::new(weights),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }
}

/// Backup copies held by one node.
#[derive(Debug, Clone, Default)]
pub struct ReplicaStore {
    chain: BTreeMap<usize, Snapshot>,
    global: BTreeMap<usize, Snapshot>,
    baseline: Option<Snapshot>,
    latest_round: u64,
}

impl ReplicaStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// The central node's copy of the initial model, used when nothing newer exists.
    pub fn seed(&mut self, weights: Arc<WeightSet>) {
        self.baseline = Some(Snapshot {
            origin_stage: 0,
            at_batch: 0,
            kind: SnapshotKind::Global,
            weights,
        });
    }

    pub fn store(&mut self, snap: Snapshot) {
        let map = match snap.kind {
            SnapshotKind::Chain => &mut self.chain,
            SnapshotKind::Global => {
                self.latest_round = self.latest_round.max(snap.at_batch);
                &mut self.global
            }
        };
        match map.get(&snap.origin_stage) {
            Some(old) if old.at_batch > snap.at_batch => {}
            _ => {
                map.insert(snap.origin_stage, snap);
            }
        }
    }

    pub fn fetch_backup(
        &self,
        origin_stage: usize,
        kind: SnapshotKind,
    ) -> Result<&Snapshot, ReplicationError> {
        let map = match kind {
            SnapshotKind::Chain => &self.chain,
            SnapshotKind::Global => &self.global,
        };
        map.get(&origin_stage)
            .ok_or(ReplicationError::NotFound(origin_stage))
    }

    fn candidates(&self) -> impl Iterator<Item = &Snapshot> {
        self.chain
            .values()
            .chain(self.global.values())
            .chain(self.baseline.iter())
    }

    /// The most recent snapshot holding layer `l`. Chain copies win ties.
    pub fn lookup_layer(&self, l: usize) -> Result<&Snapshot, ReplicationError> {
        let mut best: Option<&Snapshot> = None;
        for s in self.candidates() {
            if s.weights.contains_layer(l) && best.is_none_or(|b| s.at_batch > b.at_batch) {
                best = Some(s);
            }
        }
        best.ok_or(ReplicationError::LayerNotFound(l))
    }

    /// Parameters of layer `l` from the most recent covering snapshot.
    pub fn layer_params(&self, l: usize) -> Result<LayerParams, ReplicationError> {
        let s = self.lookup_layer(l)?;
        Ok(s.weights.layer(l).cloned().expect("snapshot covers layer"))
    }

    /// Layers held by any snapshot in the store.
    pub fn covered_layers(&self) -> BTreeSet<usize> {
        self.candidates()
            .flat_map(|s| s.weights.start()..=s.weights.end())
            .collect()
    }

    pub fn chain_snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.chain.values()
    }

    pub fn global_snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.global.values()
    }

    /// Origin stages below `n` whose global copy predates the latest round.
    pub fn stale_stages(&self, n: usize) -> Vec<usize> {
        (0..n)
            .filter(|s| {
                self.global
                    .get(s)
                    .is_none_or(|g| g.at_batch < self.latest_round)
            })
            .collect()
    }

    /// Global snapshots of round `at_batch` when they cover `0..layers` exactly once.
    pub fn complete_round(&self, at_batch: u64, layers: usize) -> Option<Vec<Snapshot>> {
        let mut snaps: Vec<Snapshot> = self
            .global
            .values()
            .filter(|s| s.at_batch == at_batch)
            .cloned()
            .collect();
        snaps.sort_by_key(|s| s.weights.start());
        let mut next = 0;
        for s in &snaps {
            if s.weights.start() != next {
                return None;
            }
            next = s.weights.end() + 1;
        }
        (next == layers).then_some(snaps)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EPCK";

/// Disk checkpoint: magic, count, then length-prefixed snapshot bytes.
pub fn encode_checkpoint(snaps: &[Snapshot]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC).u32(snaps.len() as u32);
    for s in snaps {
        let b = s.to_bytes();
        w.u32(b.len() as u32).bytes(&b);
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Snapshot>, WireError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(WireError::Malformed("not a checkpoint file".into()));
    }
    let mut r = Reader::new(&bytes[4..]);
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let _len = r.u32()?;
        out.push(Snapshot::decode(&mut r)?);
    }
    r.finish()?;
    Ok(out)
}

/// Joins a complete round of snapshots into one weight set over every layer.
pub fn assemble_checkpoint(snaps: &[Snapshot]) -> Result<(u64, WeightSet), ReplicationError> {
    let mut layers = BTreeMap::new();
    let mut at = 0;
    let mut version = 0;
    for s in snaps {
        at = at.max(s.at_batch);
        version = version.max(s.weights.version());
        for l in s.weights.start()..=s.weights.end() {
            layers.insert(l, s.weights.layer(l).cloned().expect("in range"));
        }
    }
    let end = layers
        .keys()
        .last()
        .copied()
        .ok_or(ReplicationError::LayerNotFound(0))?;
    for l in 0..=end {
        if !layers.contains_key(&l) {
            return Err(ReplicationError::LayerNotFound(l));
        }
    }
    let ws = WeightSet::assemble(version, 0, end, layers)
        .map_err(|_| ReplicationError::LayerNotFound(0))?;
    Ok((at, ws))
}
