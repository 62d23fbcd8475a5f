//! Experiment configuration files.
//!
//! ```toml
//! seed = 1
//! mode = "sim"
//! batches = 300
//! out = "runs/three.jsonl"
//!
//! [model]
//! input_dim = 16
//! hidden = [32, 32]
//! classes = 4
//!
//! [[nodes]]            # first entry is the central node
//! capacity = 1.0
//! [[nodes]]
//! capacity = 10.0      # ten times slower
//!
//! [network]
//! bandwidth = 12.5e6   # bytes per second
//! latency = 0.001
//!
//! [[faults]]
//! at_batch = 75
//! action = "kill"
//! node = 1
//! ```
//!
//! Sections `[data]`, `[optimizer]`, `[pipeline]`, `[replication]`, `[fault]`,
//! `[sim]` and `[live]` are optional and take their defaults when absent.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::LayerCosts;
use crate::data::{DataSpec, Dataset};
use crate::error::{ConfigError, Error};
use crate::fault::WorkerId;
use crate::live::LiveOptions;
use crate::model::{LayerKind, LayerStack, SgdConfig, WeightSet};
use crate::node::{BandwidthTable, FaultPolicy, NodeSetup};
use crate::pipeline::PipelineConfig;
use crate::replication::ReplicationPolicy;
use crate::simulation::{FaultAction, FaultTrigger, ScheduledFault, Simulation};
use crate::transport::sim::{LinkParams, SimNetwork};
use crate::transport::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sim,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dim: 16,
            hidden: [32, 32],
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let d = SgdConfig::default();
        OptimizerSpec {
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeSpec {
    /// Compute slowdown relative to the central node's cost model.
    pub capacity: f64,
}

impl Default for NodeSpec {
    fn default() -> Self {
        NodeSpec { capacity: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: WorkerId,
    pub b: WorkerId,
    pub bandwidth: f64,
    #[serde(default)]
    pub latency: Option<f64>,
    /// Only the `a` to `b` direction.
    #[serde(default)]
    pub directed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub bandwidth: f64,
    pub latency: f64,
    pub links: Vec<LinkSpec>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            bandwidth: 12.5e6,
            latency: 1e-3,
            links: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    /// Forward+backward seconds per layer on the central node. Derived from
    /// layer sizes and `flops` when empty.
    pub layer_costs: Vec<f64>,
    pub flops: f64,
    pub forward_fraction: f64,
    /// Virtual seconds before an unfinished run is declared stalled.
    pub max_time: Option<f64>,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            layer_costs: Vec::new(),
            flops: 1e9,
            forward_fraction: 1.0 / 3.0,
            max_time: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveSpec {
    pub host: String,
    /// First port; node `k` listens on `base_port + k`. 0 picks free ports.
    pub base_port: u16,
    /// Bytes sent per bandwidth probe.
    pub probe_bytes: usize,
    /// Wall seconds before an unfinished run is abandoned.
    pub max_seconds: f64,
}

impl Default for LiveSpec {
    fn default() -> Self {
        LiveSpec {
            host: "127.0.0.1".into(),
            base_port: 0,
            probe_bytes: 1 << 20,
            max_seconds: 300.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultActionKind {
    Kill,
    Restart,
    DropLink,
    SetCapacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub at_time: Option<f64>,
    #[serde(default)]
    pub at_batch: Option<i64>,
    pub action: FaultActionKind,
    #[serde(default)]
    pub node: Option<WorkerId>,
    #[serde(default)]
    pub restart_after: Option<f64>,
    #[serde(default)]
    pub from: Option<WorkerId>,
    #[serde(default)]
    pub to: Option<WorkerId>,
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub count: Option<u32>,
    #[serde(default)]
    pub multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Batches to train; `epochs` is used when absent.
    #[serde(default)]
    pub batches: Option<i64>,
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub replication: ReplicationPolicy,
    #[serde(default)]
    pub fault: FaultPolicy,
    #[serde(default = "default_nodes")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default)]
    pub live: LiveSpec,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Profiling repetitions on the central node.
    #[serde(default = "default_repetitions")]
    pub profile_repetitions: usize,
    /// Also train with partitioning frozen at the uniform split, for comparison.
    #[serde(default)]
    pub compare_frozen: bool,
}

fn default_seed() -> u64 {
    1
}

fn default_mode() -> Mode {
    Mode::Sim
}

fn default_nodes() -> Vec<NodeSpec> {
    vec![NodeSpec::default()]
}

fn default_repetitions() -> usize {
    crate::profiler::DEFAULT_REPETITIONS
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.input_dim == 0 || m.hidden.contains(&0) || m.classes < 2 {
            return Err(invalid(
                "model dims must be positive with at least two classes",
            ));
        }
        if self.nodes.is_empty() {
            return Err(invalid("at least one node is required"));
        }
        if self
            .nodes
            .iter()
            .any(|n| !(n.capacity.is_finite() && n.capacity > 0.0))
        {
            return Err(invalid("node capacities must be positive"));
        }
        if self.batches.is_some_and(|b| b <= 0) || self.epochs == Some(0) {
            return Err(invalid("batches and epochs must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(invalid(
                "optimizer needs lr > 0, momentum in [0,1), weight_decay >= 0",
            ));
        }
        self.pipeline
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let net = &self.network;
        if !(net.bandwidth > 0.0)
            || net.latency < 0.0
            || net.links.iter().any(|l| !(l.bandwidth > 0.0))
        {
            return Err(invalid(
                "bandwidths must be positive and latencies non-negative",
            ));
        }
        let ids = self.nodes.len() as WorkerId;
        if net.links.iter().any(|l| l.a >= ids || l.b >= ids) {
            return Err(invalid("link refers to an unknown node"));
        }
        let f = &self.fault;
        if !(f.timeout_factor > 0.0) || !(f.probe_timeout > 0.0) || !(f.transfer_timeout > 0.0) {
            return Err(invalid("fault timeouts must be positive"));
        }
        if !self.sim.layer_costs.is_empty() && self.sim.layer_costs.len() != 6 {
            return Err(invalid("sim.layer_costs needs one entry per layer (6)"));
        }
        if self.sim.layer_costs.iter().any(|c| !(*c > 0.0)) || !(self.sim.flops > 0.0) {
            return Err(invalid("layer costs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sim.forward_fraction) {
            return Err(invalid("forward_fraction must be in [0,1]"));
        }
        if self.profile_repetitions == 0 {
            return Err(invalid("profile_repetitions must be positive"));
        }
        for (i, fs) in self.faults.iter().enumerate() {
            fs.to_scheduled(ids)
                .map_err(|e| invalid(format!("faults[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn stack(&self) -> Result<LayerStack, Error> {
        Ok(LayerStack::desk(
            self.model.input_dim,
            self.model.hidden,
            self.model.classes,
        )?)
    }

    /// The dataset; the run seed is mixed into the data seed.
    pub fn dataset(&self) -> Result<Dataset, Error> {
        let mut spec = self.data.clone();
        spec.seed = spec.seed.wrapping_add(self.seed);
        Ok(Dataset::generate(
            &spec,
            self.model.input_dim,
            self.model.classes,
        )?)
    }

    pub fn total_batches(&self, dataset: &Dataset) -> i64 {
        match (self.batches, self.epochs) {
            (Some(b), _) => b,
            (None, Some(e)) => e as i64 * dataset.batches_per_epoch(),
            (None, None) => dataset.batches_per_epoch(),
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    /// Per-layer virtual costs: configured, or proportional to arithmetic work.
    pub fn layer_costs(&self, stack: &LayerStack) -> LayerCosts {
        let totals: Vec<f64> = if self.sim.layer_costs.is_empty() {
            let batch = self.data.batch_size as f64;
            stack
                .layers()
                .iter()
                .map(|l| {
                    let ops = match l.kind {
                        // forward, input gradient and weight gradient
                        LayerKind::Dense => 6.0 * (l.in_dim * l.out_dim) as f64 * batch,
                        _ => 4.0 * l.out_dim as f64 * batch,
                    };
                    ops / self.sim.flops
                })
                .collect()
        } else {
            self.sim.layer_costs.clone()
        };
        LayerCosts::from_totals(&totals, self.sim.forward_fraction)
    }

    pub fn capacities(&self) -> BTreeMap<WorkerId, f64> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i as WorkerId, n.capacity))
            .collect()
    }

    pub fn network(&self) -> SimNetwork {
        let mut net = SimNetwork::new(LinkParams {
            bandwidth: self.network.bandwidth,
            latency: self.network.latency,
        });
        for l in &self.network.links {
            let p = LinkParams {
                bandwidth: l.bandwidth,
                latency: l.latency.unwrap_or(self.network.latency),
            };
            if l.directed {
                net.set_directed(l.a, l.b, p);
            } else {
                net.set_link(l.a, l.b, p);
            }
        }
        net
    }

    /// Bandwidths as the central node would measure them in simulation.
    pub fn bandwidth_table(&self) -> BandwidthTable {
        let net = self.network();
        let mut t = BandwidthTable::uniform(self.network.bandwidth);
        let n = self.nodes.len() as WorkerId;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    t.pairs.insert((a, b), net.measure_bandwidth(a, b));
                }
            }
        }
        t
    }

    pub fn initial_weights(&self, stack: &LayerStack) -> WeightSet {
        stack.init_weights(self.seed)
    }

    /// Shared node setup. `profile` skips measuring when given.
    pub fn node_setup(
        &self,
        start_batch: i64,
        initial: Option<WeightSet>,
    ) -> Result<NodeSetup, Error> {
        let stack = self.stack()?;
        let dataset = self.dataset()?;
        let total = self.total_batches(&dataset);
        if start_batch >= total {
            return Err(invalid(format!(
                "nothing to train: start {start_batch} >= {total} batches"
            ))
            .into());
        }
        let weights = initial.unwrap_or_else(|| self.initial_weights(&stack));
        Ok(NodeSetup {
            sgd: self.sgd(),
            pipeline: self.pipeline.clone(),
            replication: self.replication.clone(),
            fault: self.fault.clone(),
            total_batches: total,
            start_batch,
            initial_weights: Arc::new(weights),
            central: 0,
            candidates: (1..self.nodes.len() as WorkerId).collect(),
            bandwidths: self.bandwidth_table(),
            profile: None,
            profile_repetitions: self.profile_repetitions,
            stack: Arc::new(stack),
            dataset: Arc::new(dataset),
        })
    }

    pub fn scheduled_faults(&self) -> Vec<ScheduledFault> {
        let ids = self.nodes.len() as WorkerId;
        self.faults
            .iter()
            .map(|f| f.to_scheduled(ids).expect("validated"))
            .collect()
    }

    /// A ready-to-run simulation of this config.
    pub fn simulation(&self) -> Result<Simulation, Error> {
        self.simulation_from(0, None)
    }

    /// Simulation resuming at `start_batch` from `initial` weights.
    pub fn simulation_from(
        &self,
        start_batch: i64,
        initial: Option<WeightSet>,
    ) -> Result<Simulation, Error> {
        let setup = Arc::new(self.node_setup(start_batch, initial)?);
        let costs = self.layer_costs(&setup.stack);
        let mut sim = Simulation::new(
            setup,
            costs,
            self.capacities(),
            self.network(),
            self.scheduled_faults(),
        );
        if let Some(t) = self.sim.max_time {
            sim = sim.with_max_time(t);
        }
        Ok(sim)
    }

    pub fn live_options(&self) -> LiveOptions {
        LiveOptions {
            host: self.live.host.clone(),
            base_port: self.live.base_port,
            probe_bytes: self.live.probe_bytes,
            max_seconds: self.live.max_seconds,
        }
    }

    /// Hex SHA-256 of the canonical serialized config. Where the log goes is
    /// not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.out = None;
        let canonical = serde_json::to_string(&cfg).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Deterministic run id: short hash, seed and mode.
    pub fn run_id(&self) -> String {
        let mode = match self.mode {
            Mode::Sim => "sim",
            Mode::Live => "live",
        };
        format!("{}-s{}-{mode}", &self.hash()[..12], self.seed)
    }
}

impl FaultSpec {
    fn to_scheduled(&self, nodes: WorkerId) -> Result<ScheduledFault, String> {
        let trigger = match (self.at_time, self.at_batch) {
            (Some(t), None) if t >= 0.0 => FaultTrigger::AtTime(t),
            (None, Some(b)) if b >= 0 => FaultTrigger::AtBatch(b),
            _ => return Err("exactly one of at_time (>= 0) or at_batch (>= 0) is required".into()),
        };
        let node = |what: Option<WorkerId>, field: &str| -> Result<WorkerId, String> {
            match what {
                Some(n) if n < nodes => Ok(n),
                Some(n) => Err(format!("{field} {n} is not a configured node")),
                None => Err(format!("{field} is required")),
            }
        };
        let action = match self.action {
            FaultActionKind::Kill => {
                let n = node(self.node, "node")?;
                if n == 0 {
                    return Err("the central node (0) cannot be killed".into());
                }
                FaultAction::Kill {
                    node: n,
                    restart_after: self.restart_after,
                }
            }
            FaultActionKind::Restart => FaultAction::Restart {
                node: node(self.node, "node")?,
            },
            FaultActionKind::DropLink => FaultAction::DropLink {
                from: node(self.from, "from")?,
                to: node(self.to, "to")?,
                kind: match &self.kind {
                    Some(k) => Some(
                        MessageKind::parse(k).ok_or_else(|| format!("unknown message kind {k}"))?,
                    ),
                    None => None,
                },
                duration: self.duration,
                count: self.count,
            },
            FaultActionKind::SetCapacity => FaultAction::SetCapacity {
                node: node(self.node, "node")?,
                multiplier: self
                    .multiplier
                    .filter(|m| *m > 0.0)
                    .ok_or("multiplier > 0 is required")?,
            },
        };
        Ok(ScheduledFault { trigger, action })
    }
}

/// Input of the standalone partition planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    /// Forward+backward seconds per layer on the central node.
    pub exec_time: Vec<f64>,
    /// Output bytes per layer.
    pub output_size: Vec<u64>,
    /// One per stage; the first is forced to 1.
    #[serde(default)]
    pub capacities: Option<Vec<f64>>,
    /// Between consecutive stages, bytes per second.
    #[serde(default)]
    pub bandwidths: Option<Vec<f64>>,
    pub stages: usize,
}

impl PlanConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}
