//! Real-time driver: one thread per node, talking length-prefixed frames over
//! loopback TCP, with compute timed on the wall clock.
//!
//! Scripted faults work as in simulation. A killed node stops its thread and
//! anything addressed to it is discarded at its listener, which looks to peers
//! exactly like a dead device.

use std::collections::{BTreeMap, HashMap};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::clock::{Pass, WallExecution};
use crate::error::Error;
use crate::fault::WorkerId;
use crate::metrics::MetricsRecord;
use crate::model::WeightSet;
use crate::node::{BandwidthTable, Effect, Node, NodeSetup, TimerKind};
use crate::simulation::{FaultAction, FaultTrigger, ScheduledFault};
use crate::transport::sim::{DropRule, LinkParams, SimNetwork};
use crate::transport::tcp::{measure_bandwidth, serve_connection, write_frame};
use crate::transport::Message;

/// Floor on the batch timeout when none is configured: wall-clock jitter on a
/// loaded host easily exceeds ten sub-millisecond batch times.
pub const LIVE_MIN_TIMEOUT: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub host: String,
    /// Node `k` listens on `base_port + k`; 0 picks free ports.
    pub base_port: u16,
    pub probe_bytes: usize,
    pub max_seconds: f64,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions {
            host: "127.0.0.1".into(),
            base_port: 0,
            probe_bytes: 1 << 20,
            max_seconds: 300.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveOutcome {
    /// In the order nodes logged them; per node this is program order.
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(u64, Vec<u8>)>,
    pub finished: bool,
    pub elapsed: f64,
    /// What the central node measured before training.
    pub bandwidths: BandwidthTable,
    /// The model as the last roster held it when training stopped.
    pub weights: Option<WeightSet>,
}

enum Input {
    Msg(Message),
    SetMultiplier(f64),
}

enum Control {
    /// The last stage is starting this batch's backward pass.
    Backward(i64),
}

struct Shared {
    start: Instant,
    addrs: BTreeMap<WorkerId, SocketAddr>,
    inboxes: Mutex<BTreeMap<WorkerId, Sender<Input>>>,
    /// Bumped on every kill; a node thread exits once its epoch is stale.
    epochs: BTreeMap<WorkerId, AtomicU64>,
    drops: Mutex<SimNetwork>,
    records: Mutex<Vec<MetricsRecord>>,
    checkpoints: Mutex<Vec<(u64, Vec<u8>)>>,
    /// Held weights of every node still alive at the end, with its generation.
    held: Mutex<Vec<(u64, WeightSet)>>,
    finished: AtomicBool,
    stop: AtomicBool,
    abort: Mutex<Option<String>>,
    control: Mutex<Sender<Control>>,
}

impl Shared {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn deliver(&self, to: WorkerId, msg: Message) {
        if let Some(tx) = self.inboxes.lock().expect("inbox lock").get(&to) {
            let _ = tx.send(Input::Msg(msg));
        }
    }
}

/// Accepts connections until `stop`, serving each on its own thread.
fn spawn_acceptor(
    id: WorkerId,
    listener: TcpListener,
    shared: Arc<Shared>,
) -> std::io::Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !shared.stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let shared = shared.clone();
                    thread::spawn(move || {
                        let _ = serve_connection(stream, |m| shared.deliver(id, m));
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2))
                }
                Err(_) => break,
            }
        }
    }))
}

struct NodeLoop {
    node: Node,
    epoch: u64,
    inbox: Receiver<Input>,
    shared: Arc<Shared>,
    timers: Vec<(f64, TimerKind)>,
    peers: HashMap<WorkerId, TcpStream>,
}

impl NodeLoop {
    fn alive(&self) -> bool {
        !self.shared.stop.load(Ordering::Relaxed)
            && self.shared.epochs[&self.node.id()].load(Ordering::SeqCst) == self.epoch
    }

    fn run(mut self, start: bool) {
        if start {
            let effects = self.node.start(self.shared.now());
            self.apply(effects);
        }
        while self.alive() {
            let now = self.shared.now();
            let due: Vec<TimerKind> = {
                let (due, rest): (Vec<_>, Vec<_>) =
                    self.timers.drain(..).partition(|(t, _)| *t <= now);
                self.timers = rest;
                due.into_iter().map(|(_, k)| k).collect()
            };
            for kind in due {
                let effects = self.node.handle_timer(self.shared.now(), kind);
                self.apply(effects);
            }
            while let Ok(input) = self.inbox.try_recv() {
                self.handle(input);
            }
            if !self.alive() {
                break;
            }
            match self.node.next_work(self.shared.now()) {
                Ok(Some(work)) => {
                    if work.pass == Pass::Backward && work.last_stage {
                        let _ = self
                            .shared
                            .control
                            .lock()
                            .expect("control lock")
                            .send(Control::Backward(work.batch));
                    }
                    if self.alive() {
                        self.apply(work.effects);
                    }
                    continue;
                }
                Ok(None) => {}
                Err(e) => {
                    self.shared
                        .abort
                        .lock()
                        .expect("abort lock")
                        .get_or_insert(e.to_string());
                    self.shared.stop.store(true, Ordering::SeqCst);
                    break;
                }
            }
            let next_timer = self
                .timers
                .iter()
                .map(|(t, _)| *t)
                .fold(f64::INFINITY, f64::min);
            let wait = (next_timer - self.shared.now()).clamp(0.0, 0.02);
            match self.inbox.recv_timeout(Duration::from_secs_f64(wait)) {
                Ok(input) => self.handle(input),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let killed = self.shared.epochs[&self.node.id()].load(Ordering::SeqCst) != self.epoch;
        if let (false, Some(exec)) = (killed, self.node.executor()) {
            let held = (self.node.generation(), exec.current().as_ref().clone());
            self.shared.held.lock().expect("held lock").push(held);
        }
    }

    fn handle(&mut self, input: Input) {
        match input {
            Input::Msg(msg) => {
                let effects = self.node.handle_message(self.shared.now(), msg);
                self.apply(effects);
            }
            Input::SetMultiplier(m) => self.node.set_multiplier(m),
        }
    }

    fn send(&mut self, msg: Message) {
        let now = self.shared.now();
        let dropped = self.shared.drops.lock().expect("drop lock").should_drop(
            now,
            msg.sender,
            msg.receiver,
            msg.kind(),
            msg.batch_id,
        );
        if dropped {
            return;
        }
        let to = msg.receiver;
        for _ in 0..2 {
            if !self.peers.contains_key(&to) {
                let Some(addr) = self.shared.addrs.get(&to) else {
                    return;
                };
                match TcpStream::connect_timeout(addr, Duration::from_secs(1)) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        self.peers.insert(to, s);
                    }
                    Err(_) => return,
                }
            }
            let stream = self.peers.get_mut(&to).expect("just connected");
            if write_frame(stream, &msg).is_ok() {
                return;
            }
            // stale connection: reconnect once
            self.peers.remove(&to);
        }
    }

    fn apply(&mut self, effects: Vec<Effect>) {
        let now = self.shared.now();
        for e in effects {
            match e {
                Effect::Send(msg) => self.send(msg),
                Effect::Timer { delay, kind } => self.timers.push((now + delay, kind)),
                Effect::Log(rec) => self.shared.records.lock().expect("records lock").push(rec),
                Effect::Checkpoint { at_batch, bytes } => self
                    .shared
                    .checkpoints
                    .lock()
                    .expect("checkpoint lock")
                    .push((at_batch, bytes)),
                Effect::Finished => {
                    self.shared.finished.store(true, Ordering::SeqCst);
                    self.shared.stop.store(true, Ordering::SeqCst);
                }
                Effect::Abort(reason) => {
                    self.shared
                        .abort
                        .lock()
                        .expect("abort lock")
                        .get_or_insert(reason);
                    self.shared.stop.store(true, Ordering::SeqCst);
                }
            }
        }
    }
}

fn spawn_node(
    id: WorkerId,
    setup: &Arc<NodeSetup>,
    shared: &Arc<Shared>,
    multiplier: f64,
    central: bool,
) -> JoinHandle<()> {
    let (tx, rx) = mpsc::channel();
    shared.inboxes.lock().expect("inbox lock").insert(id, tx);
    let epoch = shared.epochs[&id].load(Ordering::SeqCst);
    let setup = setup.clone();
    let shared = shared.clone();
    thread::spawn(move || {
        let exec = Box::new(WallExecution::new(multiplier));
        let node = if central {
            Node::new_central(setup, exec)
        } else {
            Node::new_worker(id, setup, exec)
        };
        NodeLoop {
            node,
            epoch,
            inbox: rx,
            shared,
            timers: Vec::new(),
            peers: HashMap::new(),
        }
        .run(central)
    })
}

/// Trains over loopback TCP. `setup.bandwidths` is replaced by measurement.
pub fn run_live(
    mut setup: NodeSetup,
    multipliers: &BTreeMap<WorkerId, f64>,
    faults: Vec<ScheduledFault>,
    opts: &LiveOptions,
) -> Result<LiveOutcome, Error> {
    let mut ids = vec![setup.central];
    ids.extend(setup.candidates.iter().copied());
    let mut listeners = BTreeMap::new();
    let mut addrs = BTreeMap::new();
    for &id in &ids {
        let port = if opts.base_port == 0 {
            0
        } else {
            opts.base_port + id as u16
        };
        let l = TcpListener::bind((opts.host.as_str(), port))?;
        addrs.insert(id, l.local_addr()?);
        listeners.insert(id, l);
    }
    let (control_tx, control_rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        start: Instant::now(),
        addrs,
        inboxes: Mutex::new(BTreeMap::new()),
        epochs: ids.iter().map(|&id| (id, AtomicU64::new(0))).collect(),
        drops: Mutex::new(SimNetwork::new(LinkParams {
            bandwidth: 1.0,
            latency: 0.0,
        })),
        records: Mutex::new(Vec::new()),
        checkpoints: Mutex::new(Vec::new()),
        held: Mutex::new(Vec::new()),
        finished: AtomicBool::new(false),
        stop: AtomicBool::new(false),
        abort: Mutex::new(None),
        control: Mutex::new(control_tx),
    });
    let mut acceptors = Vec::new();
    for (id, l) in listeners {
        acceptors.push(spawn_acceptor(id, l, shared.clone())?);
    }

    // the central node probes its own links; worker pairs get the mean
    let central = setup.central;
    let mut table = BandwidthTable::uniform(1.0);
    let mut measured = Vec::new();
    for &id in &setup.candidates {
        let bw = measure_bandwidth(shared.addrs[&id], central, id, opts.probe_bytes)?;
        table.pairs.insert((central, id), bw);
        table.pairs.insert((id, central), bw);
        measured.push(bw);
    }
    if !measured.is_empty() {
        table.default = measured.iter().sum::<f64>() / measured.len() as f64;
    }
    setup.bandwidths = table.clone();
    if setup.fault.timeout.is_none() && setup.fault.min_timeout == 0.0 {
        setup.fault.min_timeout = LIVE_MIN_TIMEOUT;
    }
    let setup = Arc::new(setup);
    let mult = |id: WorkerId| multipliers.get(&id).copied().unwrap_or(1.0);

    let mut handles = Vec::new();
    for &id in ids.iter().rev() {
        handles.push(spawn_node(id, &setup, &shared, mult(id), id == central));
    }

    let mut timed: Vec<(f64, FaultAction)> = Vec::new();
    let mut by_batch: Vec<(i64, FaultAction)> = Vec::new();
    for f in faults {
        match f.trigger {
            FaultTrigger::AtTime(t) => timed.push((t, f.action)),
            FaultTrigger::AtBatch(b) => by_batch.push((b, f.action)),
        }
    }
    while !shared.stop.load(Ordering::SeqCst) {
        let now = shared.now();
        if now > opts.max_seconds {
            shared.stop.store(true, Ordering::SeqCst);
            break;
        }
        let mut due: Vec<FaultAction> = Vec::new();
        timed.retain(|(t, a)| {
            if *t <= now {
                due.push(a.clone());
                false
            } else {
                true
            }
        });
        match control_rx.recv_timeout(Duration::from_millis(5)) {
            Ok(Control::Backward(b)) => by_batch.retain(|(at, a)| {
                if *at == b {
                    due.push(a.clone());
                    false
                } else {
                    true
                }
            }),
            Err(_) => {}
        }
        for action in due {
            match action {
                FaultAction::Kill {
                    node,
                    restart_after,
                } => {
                    if node == central {
                        continue;
                    }
                    shared.epochs[&node].fetch_add(1, Ordering::SeqCst);
                    shared.inboxes.lock().expect("inbox lock").remove(&node);
                    if let Some(d) = restart_after {
                        timed.push((shared.now() + d, FaultAction::Restart { node }));
                    }
                }
                FaultAction::Restart { node } => {
                    let running = shared
                        .inboxes
                        .lock()
                        .expect("inbox lock")
                        .contains_key(&node);
                    if node != central && !running {
                        handles.push(spawn_node(node, &setup, &shared, mult(node), false));
                    }
                }
                FaultAction::DropLink {
                    from,
                    to,
                    kind,
                    duration,
                    count,
                } => {
                    let now = shared.now();
                    shared.drops.lock().expect("drop lock").add_drop(DropRule {
                        from,
                        to,
                        batch: None,
                        kind,
                        from_time: now,
                        until: duration.map(|d| now + d),
                        remaining: count,
                    });
                }
                FaultAction::SetCapacity { node, multiplier } => {
                    if let Some(tx) = shared.inboxes.lock().expect("inbox lock").get(&node) {
                        let _ = tx.send(Input::SetMultiplier(multiplier));
                    }
                }
            }
        }
    }
    shared.inboxes.lock().expect("inbox lock").clear();
    for h in handles.into_iter().chain(acceptors) {
        let _ = h.join();
    }
    let elapsed = shared.now();
    if let Some(reason) = shared.abort.lock().expect("abort lock").take() {
        return Err(Error::Aborted(reason));
    }
    let finished = shared.finished.load(Ordering::SeqCst);
    if !finished {
        return Err(Error::Stalled {
            time: elapsed,
            reason: format!("not finished within {} wall seconds", opts.max_seconds),
        });
    }
    let weights = assemble_held(
        std::mem::take(&mut *shared.held.lock().expect("held lock")),
        setup.layers(),
    );
    let records = std::mem::take(&mut *shared.records.lock().expect("records lock"));
    let checkpoints = std::mem::take(&mut *shared.checkpoints.lock().expect("checkpoint lock"));
    Ok(LiveOutcome {
        records,
        checkpoints,
        finished,
        elapsed,
        bandwidths: table,
        weights,
    })
}

/// Joins the newest generation's stage weights into one model, if they cover it.
fn assemble_held(held: Vec<(u64, WeightSet)>, layers: usize) -> Option<WeightSet> {
    let newest = held.iter().map(|(g, _)| *g).max()?;
    let mut parts = BTreeMap::new();
    let mut version = 0;
    for (_, w) in held.into_iter().filter(|(g, _)| *g == newest) {
        version = version.max(w.version());
        for l in w.start()..=w.end() {
            parts.insert(l, w.layer(l).cloned()?);
        }
    }
    WeightSet::assemble(version, 0, layers - 1, parts).ok()
}
