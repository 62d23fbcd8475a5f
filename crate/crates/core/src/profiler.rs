//! Layer profiling on the central node and capacity estimation for workers.
//!
//! The central node's per-layer times are the reference: a worker's capacity is
//! the ratio of the stage time it reports to the central node's time for the same
//! layers, and per-layer worker times are the central times scaled by it.

use serde::{Deserialize, Serialize};

use crate::clock::{ExecutionClock, Pass};
use crate::error::{ModelError, PartitionError};
use crate::model::{backward_range, forward_range, LayerStack, WeightSet};
use crate::partitioner::PartitionPoints;
use crate::tensor::Tensor;

/// Default number of profiling repetitions.
pub const DEFAULT_REPETITIONS: usize = 10;

/// Per-layer execution time (forward + backward, seconds) and output size (bytes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub exec_time: Vec<f64>,
    pub output_size: Vec<u64>,
}

impl LayerProfile {
    pub fn new(exec_time: Vec<f64>, output_size: Vec<u64>) -> Result<Self, ModelError> {
        if exec_time.len() != output_size.len() || exec_time.is_empty() {
            return Err(ModelError::Invalid(format!(
                "profile has {} times and {} sizes",
                exec_time.len(),
                output_size.len()
            )));
        }
        if exec_time.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(ModelError::Invalid(
                "profiled times must be positive".into(),
            ));
        }
        if output_size.contains(&0) {
            return Err(ModelError::Invalid(
                "profiled output sizes must be positive".into(),
            ));
        }
        Ok(LayerProfile {
            exec_time,
            output_size,
        })
    }

    pub fn len(&self) -> usize {
        self.exec_time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exec_time.is_empty()
    }

    /// Central-node time of layers `start..=end`, summed in ascending layer order.
    pub fn stage_time(&self, start: usize, end: usize) -> f64 {
        let mut t = 0.0;
        for j in start..=end {
            t += self.exec_time[j];
        }
        t
    }

    pub fn total_time(&self) -> f64 {
        self.stage_time(0, self.len() - 1)
    }
}

/// Computing capacity per stage; stage 0 is the central node and is fixed at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    capacities: Vec<f64>,
}

impl CapacityEstimate {
    /// Capacities for stages 0..n. The first entry is forced to 1.
    pub fn new(mut capacities: Vec<f64>) -> Result<Self, PartitionError> {
        if capacities.is_empty() {
            return Err(PartitionError::MissingInput("no capacities".into()));
        }
        if capacities.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(PartitionError::MissingInput(format!(
                "capacities must be positive: {capacities:?}"
            )));
        }
        capacities[0] = 1.0;
        Ok(CapacityEstimate { capacities })
    }

    pub fn uniform(n: usize) -> Self {
        CapacityEstimate {
            capacities: vec![1.0; n.max(1)],
        }
    }

    pub fn get(&self, stage: usize) -> f64 {
        self.capacities[stage]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.capacities
    }

    pub fn len(&self) -> usize {
        self.capacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.capacities.is_empty()
    }
}

/// Bandwidth of each adjacent pair in the worker list: entry `i` is `B(i, i+1)` in bytes/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthMatrix {
    links: Vec<f64>,
}

impl BandwidthMatrix {
    pub fn new(links: Vec<f64>) -> Result<Self, PartitionError> {
        if links.iter().any(|b| !(*b > 0.0)) {
            return Err(PartitionError::MissingInput(format!(
                "bandwidths must be positive: {links:?}"
            )));
        }
        Ok(BandwidthMatrix { links })
    }

    /// `n - 1` links of the same bandwidth.
    pub fn uniform(n: usize, bandwidth: f64) -> Self {
        BandwidthMatrix {
            links: vec![bandwidth; n.saturating_sub(1)],
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.links[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.links
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

/// Times every layer's forward and backward pass, averaged over `repetitions`.
///
/// `labels` is needed when the stack ends with the loss layer. Output sizes are
/// the wire size of each layer's output for `sample_input`.
pub fn profile_model(
    stack: &LayerStack,
    weights: &WeightSet,
    sample_input: &Tensor,
    labels: Option<&[usize]>,
    repetitions: usize,
    clock: &mut dyn ExecutionClock,
) -> Result<LayerProfile, ModelError> {
    if repetitions == 0 {
        return Err(ModelError::Invalid(
            "profiling needs at least one repetition".into(),
        ));
    }
    let layers = stack.len();
    let mut totals = vec![0.0; layers];
    let mut sizes = vec![0u64; layers];
    for _ in 0..repetitions {
        let mut x = sample_input.clone();
        let mut records = Vec::with_capacity(layers);
        for j in 0..layers {
            let mut out = None;
            let t = clock.measure(j, Pass::Forward, &mut || {
                out = Some(forward_range(stack, weights, &x, j, j, labels));
            });
            let (y, rec) = out.expect("forward ran")?;
            totals[j] += t;
            sizes[j] = y.encoded_len() as u64;
            records.push(rec);
            x = y;
        }
        // the loss layer yields a scalar; everything else gets a ones gradient
        let mut g = Tensor::from_fn(x.shape().to_vec(), |_| 1.0);
        for j in (0..layers).rev() {
            let mut out = None;
            let t = clock.measure(j, Pass::Backward, &mut || {
                out = Some(backward_range(stack, weights, &records[j], &g));
            });
            let (_, dx) = out.expect("backward ran")?;
            totals[j] += t;
            g = dx;
        }
    }
    let exec_time = totals.iter().map(|t| t / repetitions as f64).collect();
    LayerProfile::new(exec_time, sizes)
}

/// Capacity of each stage from its reported mean stage time.
///
/// `reported[i]` is the mean time stage `i` reported for its layers under
/// `points`; missing reports default to 1. Stage 0 is always 1.
pub fn estimate_capacity(
    reported: &[Option<f64>],
    profile: &LayerProfile,
    points: &PartitionPoints,
) -> Result<CapacityEstimate, PartitionError> {
    let n = points.stages();
    if reported.len() < n {
        return Err(PartitionError::MissingInput(format!(
            "{} reports for {n} stages",
            reported.len()
        )));
    }
    let mut caps = Vec::with_capacity(n);
    for (i, report) in reported.iter().enumerate().take(n) {
        if i == 0 {
            caps.push(1.0);
            continue;
        }
        let (start, end) = points.stage_bounds(i, profile.len())?;
        let c = match report {
            Some(t) if *t > 0.0 => t / profile.stage_time(start, end),
            _ => 1.0,
        };
        caps.push(c);
    }
    CapacityEstimate::new(caps)
}

/// Estimated time of layer `j` on stage `i`: the central time scaled by `C_i`.
pub fn scaled_layer_time(
    profile: &LayerProfile,
    capacity: &CapacityEstimate,
    i: usize,
    j: usize,
) -> f64 {
    profile.exec_time[j] * capacity.get(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{LayerCosts, VirtualExecution};

    fn profile(times: &[f64]) -> LayerProfile {
        LayerProfile::new(times.to_vec(), vec![8; times.len()]).unwrap()
    }

    #[test]
    fn injected_cost_is_reported_in_virtual_time() {
        let stack = LayerStack::desk(4, [5, 5], 3).unwrap();
        let ws = stack.init_weights(0);
        let x = Tensor::zeros(vec![2, 4]);
        let labels = [0usize, 1];
        let costs = LayerCosts::from_totals(&[0.005; 6], 0.5);
        let mut clock = VirtualExecution::new(costs, 1.0);
        let p = profile_model(
            &stack,
            &ws,
            &x,
            Some(&labels),
            DEFAULT_REPETITIONS,
            &mut clock,
        )
        .unwrap();
        for t in &p.exec_time {
            assert!((t - 0.005).abs() < 1e-15, "{t}");
        }
        // dense 4->5 output [2,5]: 4 + 8 + 80 bytes
        assert_eq!(p.output_size[0], 92);
        // loss output is a [1] tensor
        assert_eq!(p.output_size[5], 4 + 4 + 8);
    }

    #[test]
    fn zero_repetitions_rejected() {
        let stack = LayerStack::desk(4, [5, 5], 3).unwrap();
        let ws = stack.init_weights(0);
        let mut clock = VirtualExecution::new(LayerCosts::from_totals(&[0.001; 6], 0.5), 1.0);
        assert!(profile_model(
            &stack,
            &ws,
            &Tensor::zeros(vec![1, 4]),
            Some(&[0]),
            0,
            &mut clock
        )
        .is_err());
    }

    #[test]
    fn capacity_from_reported_time() {
        let p = profile(&[1.0, 2.0, 1.0, 2.0]);
        let points = PartitionPoints::new(vec![1], 4).unwrap();
        // stage 1 owns layers 2..=3 (central sum 3.0) and reports 6.0
        let c = estimate_capacity(&[Some(123.0), Some(6.0)], &p, &points).unwrap();
        assert_eq!(c.get(0), 1.0);
        assert_eq!(c.get(1), 2.0);
        let same = estimate_capacity(&[None, Some(3.0)], &p, &points).unwrap();
        assert_eq!(same.get(1), 1.0);
    }

    #[test]
    fn missing_reports_default_to_one() {
        let p = profile(&[1.0, 2.0, 1.0]);
        let points = PartitionPoints::new(vec![0, 1], 3).unwrap();
        let c = estimate_capacity(&[None, None, None], &p, &points).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn scaled_time() {
        let p = profile(&[0.003, 0.001]);
        let c = CapacityEstimate::new(vec![1.0, 2.0]).unwrap();
        assert_eq!(scaled_layer_time(&p, &c, 1, 0), 0.006);
        assert_eq!(scaled_layer_time(&p, &c, 0, 0), 0.003);
    }
}
