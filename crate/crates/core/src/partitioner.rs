//! Stage assignment: partition points, the bottleneck dynamic program, and an
//! exhaustive enumerator used to cross-check it.
//!
//! A pipeline with `n` stages over `L` layers is described by `n - 1` strictly
//! increasing split indices. Stage `i` owns `points[i-1]+1 ..= points[i]`, stage 0
//! starts at layer 0 and the last stage ends at layer `L - 1`.
//!
//! The dynamic program minimizes the slowest component of the pipeline:
//!
//! ```text
//! A(j, 1) = C_0 * sum(t[0..=j])
//! A(j, k) = min over l of max( A(l, k-1),
//!                              2 * D_l / B(k-2, k-1),
//!                              C_{k-1} * sum(t[l+1..=j]) )
//! ```
//!
//! with `l` restricted so every stage keeps at least one layer. Among equal
//! bottlenecks the earliest split wins.

use serde::{Deserialize, Serialize};

use crate::error::PartitionError;
use crate::profiler::{BandwidthMatrix, CapacityEstimate, LayerProfile};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionPoints {
    points: Vec<usize>,
    layers: usize,
}

impl PartitionPoints {
    pub fn new(points: Vec<usize>, layers: usize) -> Result<Self, PartitionError> {
        let valid = points.windows(2).all(|w| w[0] < w[1])
            && points.last().is_none_or(|p| *p + 1 < layers)
            && points.len() < layers.max(1);
        if !valid || layers == 0 {
            return Err(PartitionError::InvalidPoints { points, layers });
        }
        Ok(PartitionPoints { points, layers })
    }

    /// Everything on one stage.
    pub fn single(layers: usize) -> Self {
        PartitionPoints {
            points: Vec::new(),
            layers,
        }
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn stages(&self) -> usize {
        self.points.len() + 1
    }

    /// Inclusive layer bounds of `stage`. `layers` must match the model.
    pub fn stage_bounds(
        &self,
        stage: usize,
        layers: usize,
    ) -> Result<(usize, usize), PartitionError> {
        stage_bounds(self, stage, layers)
    }

    pub fn bounds(&self, stage: usize) -> (usize, usize) {
        stage_bounds(self, stage, self.layers).expect("stage in range")
    }

    pub fn all_bounds(&self) -> Vec<(usize, usize)> {
        (0..self.stages()).map(|s| self.bounds(s)).collect()
    }

    /// Stage owning layer `l`.
    pub fn stage_of(&self, l: usize) -> usize {
        self.points.iter().take_while(|p| **p < l).count()
    }
}

/// Inclusive `(start, end)` of `stage` under `points`.
pub fn stage_bounds(
    points: &PartitionPoints,
    stage: usize,
    layers: usize,
) -> Result<(usize, usize), PartitionError> {
    let n = points.stages();
    if stage >= n {
        return Err(PartitionError::StageOutOfRange { stage, stages: n });
    }
    if layers != points.layers {
        return Err(PartitionError::InvalidPoints {
            points: points.points.clone(),
            layers,
        });
    }
    let start = if stage == 0 {
        0
    } else {
        points.points[stage - 1] + 1
    };
    let end = if stage + 1 == n {
        layers - 1
    } else {
        points.points[stage]
    };
    Ok((start, end))
}

/// Filled dynamic-programming table.
///
/// `a[j][k]` is the optimal bottleneck of layers `0..=j` over `k` stages and
/// `split[j][k]` the last split chosen for it; `k = 0` is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct DpTable {
    pub a: Vec<Vec<f64>>,
    pub split: Vec<Vec<Option<usize>>>,
}

fn comm_time(profile: &LayerProfile, layer: usize, bandwidth: f64) -> f64 {
    2.0 * profile.output_size[layer] as f64 / bandwidth
}

fn stage_compute(profile: &LayerProfile, capacity: f64, start: usize, end: usize) -> f64 {
    capacity * profile.stage_time(start, end)
}

fn check_inputs(
    profile: &LayerProfile,
    capacities: &CapacityEstimate,
    bandwidths: &BandwidthMatrix,
    n: usize,
) -> Result<(), PartitionError> {
    let layers = profile.len();
    if n == 0 || n > layers {
        return Err(PartitionError::Infeasible { layers, stages: n });
    }
    if capacities.len() < n {
        return Err(PartitionError::MissingInput(format!(
            "{} capacities for {n} stages",
            capacities.len()
        )));
    }
    if bandwidths.len() < n - 1 {
        return Err(PartitionError::MissingInput(format!(
            "{} bandwidths for {n} stages",
            bandwidths.len()
        )));
    }
    Ok(())
}

pub fn dp_table(
    profile: &LayerProfile,
    capacities: &CapacityEstimate,
    bandwidths: &BandwidthMatrix,
    n: usize,
) -> Result<DpTable, PartitionError> {
    check_inputs(profile, capacities, bandwidths, n)?;
    let layers = profile.len();
    let mut a = vec![vec![f64::INFINITY; n + 1]; layers];
    let mut split = vec![vec![None; n + 1]; layers];
    for j in 0..layers {
        a[j][1] = stage_compute(profile, capacities.get(0), 0, j);
    }
    for k in 2..=n {
        let cap = capacities.get(k - 1);
        let bw = bandwidths.get(k - 2);
        for j in (k - 1)..layers {
            let mut best = f64::INFINITY;
            let mut best_l = None;
            // the first k-1 stages need k-1 layers, the new stage at least one
            for l in (k - 2)..j {
                let cand = a[l][k - 1]
                    .max(comm_time(profile, l, bw))
                    .max(stage_compute(profile, cap, l + 1, j));
                if cand < best {
                    best = cand;
                    best_l = Some(l);
                }
            }
            a[j][k] = best;
            split[j][k] = best_l;
        }
    }
    Ok(DpTable { a, split })
}

/// Partition minimizing the pipeline bottleneck, and that bottleneck in seconds.
pub fn optimal_partition(
    profile: &LayerProfile,
    capacities: &CapacityEstimate,
    bandwidths: &BandwidthMatrix,
    n: usize,
) -> Result<(PartitionPoints, f64), PartitionError> {
    let table = dp_table(profile, capacities, bandwidths, n)?;
    let layers = profile.len();
    let mut points = Vec::with_capacity(n - 1);
    let mut j = layers - 1;
    for k in (2..=n).rev() {
        let l = table.split[j][k].expect("feasible cell has a split");
        points.push(l);
        j = l;
    }
    points.reverse();
    Ok((
        PartitionPoints::new(points, layers)?,
        table.a[layers - 1][n],
    ))
}

/// The initial partition: every stage assumed as fast as the central node.
pub fn average_partition(
    profile: &LayerProfile,
    bandwidths: &BandwidthMatrix,
    n: usize,
) -> Result<PartitionPoints, PartitionError> {
    optimal_partition(profile, &CapacityEstimate::uniform(n), bandwidths, n).map(|(p, _)| p)
}

/// Bottleneck of a given partition under the same cost model as the dynamic program.
pub fn evaluate_partition(
    profile: &LayerProfile,
    capacities: &CapacityEstimate,
    bandwidths: &BandwidthMatrix,
    points: &PartitionPoints,
) -> Result<f64, PartitionError> {
    let n = points.stages();
    check_inputs(profile, capacities, bandwidths, n)?;
    let mut worst: f64 = 0.0;
    for (i, (start, end)) in points.all_bounds().into_iter().enumerate() {
        worst = worst.max(stage_compute(profile, capacities.get(i), start, end));
        if i + 1 < n {
            worst = worst.max(comm_time(profile, end, bandwidths.get(i)));
        }
    }
    Ok(worst)
}

/// Exhaustive enumeration of every split, as an independent check of the
/// dynamic program. Exponential; meant for small models.
pub mod oracle {
    use super::*;

    fn next_combination(c: &mut [usize], max_exclusive: usize) -> bool {
        let k = c.len();
        for i in (0..k).rev() {
            if c[i] < max_exclusive - (k - i) {
                c[i] += 1;
                for m in i + 1..k {
                    c[m] = c[m - 1] + 1;
                }
                return true;
            }
        }
        false
    }

    /// Minimum bottleneck over all `C(L-1, n-1)` splits, with the first split
    /// (in lexicographic order) achieving it.
    pub fn brute_force_partition(
        profile: &LayerProfile,
        capacities: &CapacityEstimate,
        bandwidths: &BandwidthMatrix,
        n: usize,
    ) -> Result<(Vec<usize>, f64), PartitionError> {
        let layers = profile.len();
        if n == 0 || n > layers || capacities.len() < n || bandwidths.len() + 1 < n {
            return Err(PartitionError::Infeasible { layers, stages: n });
        }
        let mut combo: Vec<usize> = (0..n - 1).collect();
        let mut best = (combo.clone(), f64::INFINITY);
        loop {
            let mut worst: f64 = 0.0;
            let mut start = 0;
            for i in 0..n {
                let end = if i + 1 == n { layers - 1 } else { combo[i] };
                let mut sum = 0.0;
                for m in start..=end {
                    sum += profile.exec_time[m];
                }
                worst = worst.max(capacities.as_slice()[i] * sum);
                if i + 1 < n {
                    worst =
                        worst.max(2.0 * profile.output_size[end] as f64 / bandwidths.as_slice()[i]);
                }
                start = end + 1;
            }
            if worst < best.1 {
                best = (combo.clone(), worst);
            }
            if n == 1 || !next_combination(&mut combo, layers - 1) {
                break;
            }
        }
        Ok(best)
    }
}
