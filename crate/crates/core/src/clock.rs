//! Timing sources for layer execution.
//!
//! Profiling and the stage executors time their work through [`ExecutionClock`],
//! so the same code runs against a virtual cost model (simulation) or the
//! monotonic wall clock (live runs).

use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

/// Measures the execution time of one layer's pass.
pub trait ExecutionClock: Send {
    /// Runs `work` for `layer` and returns the elapsed seconds.
    fn measure(&mut self, layer: usize, pass: Pass, work: &mut dyn FnMut()) -> f64;

    /// Slowdown factor applied to this node's compute.
    fn set_multiplier(&mut self, multiplier: f64);

    fn multiplier(&self) -> f64;
}

/// Per-layer virtual costs in seconds, split into forward and backward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCosts {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

impl LayerCosts {
    /// Splits each layer's total cost with `forward_fraction` going to the forward pass.
    pub fn from_totals(totals: &[f64], forward_fraction: f64) -> Self {
        LayerCosts {
            forward: totals.iter().map(|t| t * forward_fraction).collect(),
            backward: totals
                .iter()
                .map(|t| t * (1.0 - forward_fraction))
                .collect(),
        }
    }

    pub fn total(&self, layer: usize) -> f64 {
        self.forward[layer] + self.backward[layer]
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Virtual-time execution: the work runs, the reported time is the configured cost.
#[derive(Debug, Clone)]
pub struct VirtualExecution {
    costs: LayerCosts,
    multiplier: f64,
}

impl VirtualExecution {
    pub fn new(costs: LayerCosts, multiplier: f64) -> Self {
        VirtualExecution { costs, multiplier }
    }
}

impl ExecutionClock for VirtualExecution {
    fn measure(&mut self, layer: usize, pass: Pass, work: &mut dyn FnMut()) -> f64 {
        work();
        let base = match pass {
            Pass::Forward => self.costs.forward[layer],
            Pass::Backward => self.costs.backward[layer],
        };
        base * self.multiplier
    }

    fn set_multiplier(&mut self, multiplier: f64) {
        self.multiplier = multiplier;
    }

    fn multiplier(&self) -> f64 {
        self.multiplier
    }
}

/// Monotonic wall clock. A multiplier above 1 emulates a slower device by
/// sleeping for the extra time.
#[derive(Debug, Clone)]
pub struct WallExecution {
    multiplier: f64,
}

impl WallExecution {
    pub fn new(multiplier: f64) -> Self {
        WallExecution { multiplier }
    }
}

impl ExecutionClock for WallExecution {
    fn measure(&mut self, _layer: usize, _pass: Pass, work: &mut dyn FnMut()) -> f64 {
        let t0 = Instant::now();
        work();
        let base = t0.elapsed().as_secs_f64();
        if self.multiplier > 1.0 {
            std::thread::sleep(Duration::from_secs_f64(base * (self.multiplier - 1.0)));
        }
        // keep strictly positive so profiles stay valid on coarse timers
        (base * self.multiplier.max(1.0)).max(1e-9)
    }

    fn set_multiplier(&mut self, multiplier: f64) {
        self.multiplier = multiplier;
    }

    fn multiplier(&self) -> f64 {
        self.multiplier
    }
}
