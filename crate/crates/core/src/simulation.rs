//! Discrete-event driver: runs a set of nodes in virtual time over a simulated
//! network, with scripted faults and capacity changes.
//!
//! Every message is encoded on send and decoded on delivery, so the simulated
//! run exercises the same framing as a TCP run. Events at equal times are
//! processed in scheduling order, which makes a run a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use crate::clock::{LayerCosts, Pass, VirtualExecution};
use crate::error::Error;
use crate::fault::WorkerId;
use crate::metrics::MetricsRecord;
use crate::model::WeightSet;
use crate::node::{Effect, Node, NodeSetup, TimerKind};
use crate::transport::sim::{DropRule, SimNetwork};
use crate::transport::{Message, MessageKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultTrigger {
    AtTime(f64),
    /// When the last stage starts the backward pass of this batch.
    AtBatch(i64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultAction {
    Kill {
        node: WorkerId,
        /// Bring the node back, with empty memory, this many seconds later.
        restart_after: Option<f64>,
    },
    Restart {
        node: WorkerId,
    },
    DropLink {
        from: WorkerId,
        to: WorkerId,
        kind: Option<MessageKind>,
        /// Seconds the link stays down; `None` for the rest of the run.
        duration: Option<f64>,
        count: Option<u32>,
    },
    SetCapacity {
        node: WorkerId,
        multiplier: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledFault {
    pub trigger: FaultTrigger,
    pub action: FaultAction,
}

#[derive(Debug)]
enum EventKind {
    Start,
    Deliver(Vec<u8>),
    WorkDone {
        node: WorkerId,
        incarnation: u64,
        effects: Vec<Effect>,
    },
    Timer {
        node: WorkerId,
        incarnation: u64,
        kind: TimerKind,
    },
    Fault(FaultAction),
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: the heap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Slot {
    node: Node,
    incarnation: u64,
    alive: bool,
    busy: bool,
}

/// What a simulated run produced.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(u64, Vec<u8>)>,
    pub finished: bool,
    pub end_time: f64,
    pub messages_sent: u64,
    pub messages_dropped: u64,
}

pub struct Simulation {
    setup: Arc<NodeSetup>,
    costs: LayerCosts,
    multipliers: BTreeMap<WorkerId, f64>,
    slots: BTreeMap<WorkerId, Slot>,
    net: SimNetwork,
    heap: BinaryHeap<Event>,
    now: f64,
    seq: u64,
    batch_faults: Vec<(i64, FaultAction)>,
    records: Vec<MetricsRecord>,
    checkpoints: Vec<(u64, Vec<u8>)>,
    finished: bool,
    aborted: Option<String>,
    max_time: f64,
}

impl Simulation {
    /// Nodes are the central node plus `setup.candidates`; `multipliers` slows
    /// individual nodes down relative to `costs`.
    pub fn new(
        setup: Arc<NodeSetup>,
        costs: LayerCosts,
        multipliers: BTreeMap<WorkerId, f64>,
        net: SimNetwork,
        faults: Vec<ScheduledFault>,
    ) -> Self {
        let mut sim = Simulation {
            setup: setup.clone(),
            costs,
            multipliers,
            slots: BTreeMap::new(),
            net,
            heap: BinaryHeap::new(),
            now: 0.0,
            seq: 0,
            batch_faults: Vec::new(),
            records: Vec::new(),
            checkpoints: Vec::new(),
            finished: false,
            aborted: None,
            max_time: f64::INFINITY,
        };
        let central = Node::new_central(setup.clone(), sim.clock_for(setup.central));
        sim.insert(central);
        for w in &setup.candidates {
            let node = Node::new_worker(*w, setup.clone(), sim.clock_for(*w));
            sim.insert(node);
        }
        for f in faults {
            match f.trigger {
                FaultTrigger::AtTime(t) => sim.push(t, EventKind::Fault(f.action)),
                FaultTrigger::AtBatch(b) => sim.batch_faults.push((b, f.action)),
            }
        }
        sim.push(0.0, EventKind::Start);
        sim
    }

    /// Virtual seconds after which a run that has not finished counts as stalled.
    pub fn with_max_time(mut self, max_time: f64) -> Self {
        self.max_time = max_time;
        self
    }

    fn clock_for(&self, id: WorkerId) -> Box<VirtualExecution> {
        let m = self.multipliers.get(&id).copied().unwrap_or(1.0);
        Box::new(VirtualExecution::new(self.costs.clone(), m))
    }

    fn insert(&mut self, node: Node) {
        let id = node.id();
        let incarnation = self.slots.get(&id).map_or(0, |s| s.incarnation + 1);
        self.slots.insert(
            id,
            Slot {
                node,
                incarnation,
                alive: true,
                busy: false,
            },
        );
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn node(&self, id: WorkerId) -> Option<&Node> {
        self.slots.get(&id).map(|s| &s.node)
    }

    pub fn is_alive(&self, id: WorkerId) -> bool {
        self.slots.get(&id).is_some_and(|s| s.alive)
    }

    pub fn central(&self) -> &Node {
        &self.slots[&self.setup.central].node
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn network(&self) -> &SimNetwork {
        &self.net
    }

    /// The full model as currently held by the central node's roster.
    pub fn assembled_weights(&self) -> Result<WeightSet, Error> {
        let mut layers = BTreeMap::new();
        let mut version = 0;
        for id in self.central().roster() {
            let slot = self.slots.get(id).filter(|s| s.alive);
            let exec = slot
                .and_then(|s| s.node.executor())
                .ok_or_else(|| Error::Aborted(format!("worker {id} holds no stage")))?;
            let w = exec.current();
            version = version.max(w.version());
            for l in w.start()..=w.end() {
                layers.insert(l, w.layer(l).cloned().expect("in range"));
            }
        }
        let end = self.setup.layers() - 1;
        WeightSet::assemble(version, 0, end, layers).map_err(|e| Error::Aborted(e.to_string()))
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<SimOutcome, Error> {
        self.run_until(|_| false)?;
        Ok(self.outcome())
    }

    pub fn outcome(&self) -> SimOutcome {
        SimOutcome {
            records: self.records.clone(),
            checkpoints: self.checkpoints.clone(),
            finished: self.finished,
            end_time: self.now,
            messages_sent: self.net.sent(),
            messages_dropped: self.net.dropped(),
        }
    }

    /// Processes events until training finishes or `stop` holds. Returns whether `stop` fired.
    pub fn run_until(&mut self, mut stop: impl FnMut(&Simulation) -> bool) -> Result<bool, Error> {
        while !self.finished {
            if let Some(reason) = self.aborted.take() {
                return Err(Error::Aborted(reason));
            }
            if stop(self) {
                return Ok(true);
            }
            let Some(ev) = self.heap.pop() else {
                return Err(Error::Stalled {
                    time: self.now,
                    reason: "no pending events".into(),
                });
            };
            if ev.time > self.max_time {
                return Err(Error::Stalled {
                    time: self.now,
                    reason: format!("not finished by t={}", self.max_time),
                });
            }
            self.now = ev.time.max(self.now);
            self.step(ev.kind)?;
        }
        if let Some(reason) = self.aborted.take() {
            return Err(Error::Aborted(reason));
        }
        Ok(false)
    }

    fn step(&mut self, kind: EventKind) -> Result<(), Error> {
        let now = self.now;
        match kind {
            EventKind::Start => {
                let central = self.setup.central;
                let effects = self
                    .slots
                    .get_mut(&central)
                    .expect("central")
                    .node
                    .start(now);
                self.apply(central, effects);
                self.kick(central)?;
            }
            EventKind::Deliver(frame) => {
                let msg = Message::decode(&frame)?;
                let to = msg.receiver;
                let Some(slot) = self.slots.get_mut(&to).filter(|s| s.alive) else {
                    return Ok(());
                };
                let effects = slot.node.handle_message(now, msg);
                self.apply(to, effects);
                self.kick(to)?;
            }
            EventKind::WorkDone {
                node,
                incarnation,
                effects,
            } => {
                let Some(slot) = self
                    .slots
                    .get_mut(&node)
                    .filter(|s| s.alive && s.incarnation == incarnation)
                else {
                    return Ok(());
                };
                slot.busy = false;
                self.apply(node, effects);
                self.kick(node)?;
            }
            EventKind::Timer {
                node,
                incarnation,
                kind,
            } => {
                let Some(slot) = self
                    .slots
                    .get_mut(&node)
                    .filter(|s| s.alive && s.incarnation == incarnation)
                else {
                    return Ok(());
                };
                let effects = slot.node.handle_timer(now, kind);
                self.apply(node, effects);
                self.kick(node)?;
            }
            EventKind::Fault(action) => self.inject(action)?,
        }
        Ok(())
    }

    fn inject(&mut self, action: FaultAction) -> Result<(), Error> {
        let now = self.now;
        match action {
            FaultAction::Kill {
                node,
                restart_after,
            } => {
                if node == self.setup.central {
                    return Err(Error::Aborted("the central node cannot be killed".into()));
                }
                if let Some(slot) = self.slots.get_mut(&node) {
                    slot.alive = false;
                    slot.busy = false;
                    slot.incarnation += 1;
                }
                if let Some(d) = restart_after {
                    self.push(now + d, EventKind::Fault(FaultAction::Restart { node }));
                }
            }
            FaultAction::Restart { node } => {
                if node == self.setup.central || self.is_alive(node) {
                    return Ok(());
                }
                let fresh = Node::new_worker(node, self.setup.clone(), self.clock_for(node));
                self.insert(fresh);
            }
            FaultAction::DropLink {
                from,
                to,
                kind,
                duration,
                count,
            } => self.net.add_drop(DropRule {
                from,
                to,
                batch: None,
                kind,
                from_time: now,
                until: duration.map(|d| now + d),
                remaining: count,
            }),
            FaultAction::SetCapacity { node, multiplier } => {
                self.multipliers.insert(node, multiplier);
                if let Some(slot) = self.slots.get_mut(&node) {
                    slot.node.set_multiplier(multiplier);
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, from: WorkerId, effects: Vec<Effect>) {
        let now = self.now;
        let incarnation = self.slots.get(&from).map_or(0, |s| s.incarnation);
        for e in effects {
            match e {
                Effect::Send(msg) => {
                    if self
                        .net
                        .should_drop(now, msg.sender, msg.receiver, msg.kind(), msg.batch_id)
                    {
                        continue;
                    }
                    let frame = msg.encode();
                    let at = self
                        .net
                        .transmit(now, msg.sender, msg.receiver, frame.len());
                    self.push(at, EventKind::Deliver(frame));
                }
                Effect::Timer { delay, kind } => self.push(
                    now + delay,
                    EventKind::Timer {
                        node: from,
                        incarnation,
                        kind,
                    },
                ),
                Effect::Log(rec) => self.records.push(rec),
                Effect::Checkpoint { at_batch, bytes } => self.checkpoints.push((at_batch, bytes)),
                Effect::Finished => self.finished = true,
                Effect::Abort(reason) => {
                    self.aborted.get_or_insert(reason);
                }
            }
        }
    }

    /// Hands the node its next work item if it is idle.
    fn kick(&mut self, id: WorkerId) -> Result<(), Error> {
        let now = self.now;
        let Some(slot) = self.slots.get_mut(&id) else {
            return Ok(());
        };
        if !slot.alive || slot.busy {
            return Ok(());
        }
        let Some(work) = slot.node.next_work(now)? else {
            return Ok(());
        };
        slot.busy = true;
        let incarnation = slot.incarnation;
        if work.pass == Pass::Backward && work.last_stage {
            let due: Vec<FaultAction> = self
                .batch_faults
                .iter()
                .filter(|(b, _)| *b == work.batch)
                .map(|(_, a)| a.clone())
                .collect();
            self.batch_faults.retain(|(b, _)| *b != work.batch);
            for a in due {
                self.push(now, EventKind::Fault(a));
            }
        }
        self.push(
            now + work.duration,
            EventKind::WorkDone {
                node: id,
                incarnation,
                effects: work.effects,
            },
        );
        Ok(())
    }
}
