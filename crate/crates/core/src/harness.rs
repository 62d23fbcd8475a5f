//! Command implementations behind the `edgepipe` binary.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Mode, PlanConfig};
use crate::error::Error;
use crate::live::run_live;
use crate::metrics::{read_records, EventKind, MetricsRecord, MetricsWriter};
use crate::model::WeightSet;
use crate::partitioner::{
    evaluate_partition, optimal_partition, oracle::brute_force_partition, PartitionPoints,
};
use crate::profiler::{BandwidthMatrix, CapacityEstimate, LayerProfile};
use crate::replication::{assemble_checkpoint, decode_checkpoint};
use crate::verify::{verify_records, VerifyReport};

pub const DEFAULT_METRICS: &str = "metrics.jsonl";

/// Raw products of one training run in either mode.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<(u64, Vec<u8>)>,
    pub elapsed: f64,
    pub weights: Option<WeightSet>,
}

/// Trains `cfg` from `start_batch`, starting from `initial` weights if given.
pub fn execute(
    cfg: &ExperimentConfig,
    start_batch: i64,
    initial: Option<WeightSet>,
) -> Result<RunArtifacts, Error> {
    match cfg.mode {
        Mode::Sim => {
            let mut sim = cfg.simulation_from(start_batch, initial)?;
            let out = sim.run()?;
            Ok(RunArtifacts {
                records: out.records,
                checkpoints: out.checkpoints,
                elapsed: out.end_time,
                weights: sim.assembled_weights().ok(),
            })
        }
        Mode::Live => {
            let setup = cfg.node_setup(start_batch, initial)?;
            let out = run_live(
                setup,
                &cfg.capacities(),
                cfg.scheduled_faults(),
                &cfg.live_options(),
            )?;
            Ok(RunArtifacts {
                records: out.records,
                checkpoints: out.checkpoints,
                elapsed: out.elapsed,
                weights: out.weights,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub mode: Mode,
    pub records: usize,
    pub batches: usize,
    pub elapsed: f64,
    /// Mean over the last ten logged losses.
    pub final_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub period: Option<f64>,
    /// Period of the same run with partitioning frozen, when compared.
    pub frozen_period: Option<f64>,
    pub faults: usize,
    pub recoveries: usize,
    pub metrics: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run {} ({:?})", self.run_id, self.mode)?;
        writeln!(f, "batches   {}", self.batches)?;
        writeln!(f, "elapsed   {:.6} s", self.elapsed)?;
        if let Some(l) = self.final_loss {
            writeln!(f, "loss      {l:.6}")?;
        }
        if let Some(a) = self.accuracy {
            writeln!(f, "accuracy  {a:.4}")?;
        }
        if let Some(p) = self.period {
            writeln!(f, "period    {p:.6} s per batch (steady state)")?;
        }
        if let Some(fp) = self.frozen_period {
            let ratio = self
                .period
                .map_or(String::new(), |p| format!(", ratio {:.4}", p / fp));
            writeln!(f, "frozen    {fp:.6} s per batch{ratio}")?;
        }
        writeln!(
            f,
            "faults    {} detected, {} recovered",
            self.faults, self.recoveries
        )?;
        write!(
            f,
            "metrics   {} ({} records)",
            self.metrics.display(),
            self.records
        )?;
        if let Some(c) = &self.checkpoint {
            write!(f, "\ncheckpoint {}", c.display())?;
        }
        Ok(())
    }
}

/// Mean of the last `n` losses the final stage logged.
pub fn trailing_loss(records: &[MetricsRecord], n: usize) -> Option<f64> {
    let losses: Vec<f64> = records.iter().filter_map(|r| r.loss).collect();
    if losses.is_empty() {
        return None;
    }
    let tail = &losses[losses.len().saturating_sub(n)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Median gap between stage-0 backward completions over the second half of
/// the run. The median ignores the drains around re-partitions.
pub fn steady_period(records: &[MetricsRecord]) -> Option<f64> {
    let ends: Vec<f64> = records
        .iter()
        .filter(|r| r.event == EventKind::B && r.stage == 0)
        .map(|r| r.t + r.duration)
        .collect();
    let tail = &ends[ends.len() / 2..];
    let mut gaps: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(cfg.out.as_deref().unwrap_or(DEFAULT_METRICS))
}

fn finish_run(cfg: &ExperimentConfig, art: RunArtifacts) -> Result<RunSummary, Error> {
    let path = metrics_path(cfg);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let hash = cfg.hash();
    let run_id = cfg.run_id();
    let mut w = MetricsWriter::new(
        BufWriter::new(File::create(&path)?),
        run_id.clone(),
        hash.clone(),
    );
    for r in &art.records {
        w.write(r)?;
    }
    w.finish()?;

    let checkpoint = match art.checkpoints.last() {
        Some((_, bytes)) => {
            let p = path.with_extension("ckpt");
            std::fs::write(&p, bytes)?;
            Some(p)
        }
        None => None,
    };
    let batches: BTreeSet<i64> = art
        .records
        .iter()
        .filter(|r| r.event == EventKind::B && r.stage == 0)
        .map(|r| r.batch_id)
        .collect();
    let count = |k: EventKind| {
        art.records
            .iter()
            .filter(|r| r.event == k && r.stage == 0)
            .count()
    };
    let accuracy = match &art.weights {
        Some(w) => Some(cfg.dataset()?.accuracy(&cfg.stack()?, w)?),
        None => None,
    };
    Ok(RunSummary {
        run_id,
        config_hash: hash,
        mode: cfg.mode,
        records: art.records.len(),
        batches: batches.len(),
        elapsed: art.elapsed,
        final_loss: trailing_loss(&art.records, 10),
        accuracy,
        period: steady_period(&art.records),
        frozen_period: None,
        faults: count(EventKind::Fault),
        recoveries: count(EventKind::Recover),
        metrics: path,
        checkpoint,
    })
}

/// Trains from scratch and writes the metrics log, plus the newest checkpoint
/// when replication writes them.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary, Error> {
    let art = execute(cfg, 0, None)?;
    let mut summary = finish_run(cfg, art)?;
    if cfg.compare_frozen {
        let mut frozen = cfg.clone();
        frozen.pipeline.dynamic_partition = false;
        summary.frozen_period = steady_period(&execute(&frozen, 0, None)?.records);
    }
    Ok(summary)
}

/// Resumes training from a checkpoint file at the batch it was taken.
pub fn cmd_restore(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<RunSummary, Error> {
    let bytes = std::fs::read(checkpoint)?;
    let snaps = decode_checkpoint(&bytes)?;
    let (at, weights) = assemble_checkpoint(&snaps)?;
    let art = execute(cfg, at as i64, Some(weights))?;
    finish_run(cfg, art)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    pub stage: usize,
    pub start: usize,
    pub end: usize,
    pub compute: f64,
    /// Seconds to ship this stage's output forward and its gradient back.
    pub comm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub points: PartitionPoints,
    pub bottleneck: f64,
    pub rows: Vec<StageRow>,
    pub oracle: Option<(Vec<usize>, f64)>,
}

impl PlanReport {
    pub fn oracle_agrees(&self) -> Option<bool> {
        self.oracle.as_ref().map(|(_, b)| *b == self.bottleneck)
    }
}

impl fmt::Display for PlanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rows.len() == 1 {
            writeln!(f, "single stage: layers 0..={}", self.rows[0].end)?;
        } else {
            writeln!(f, "points {:?}", self.points.points())?;
        }
        writeln!(
            f,
            "{:<6} {:<10} {:>12} {:>12}",
            "stage", "layers", "compute s", "comm s"
        )?;
        for r in &self.rows {
            let comm = r.comm.map_or("-".to_string(), |c| format!("{c:.6}"));
            writeln!(
                f,
                "{:<6} {:<10} {:>12.6} {:>12}",
                r.stage,
                format!("{}..={}", r.start, r.end),
                r.compute,
                comm
            )?;
        }
        write!(f, "bottleneck {} s", self.bottleneck)?;
        if let Some((points, b)) = &self.oracle {
            let verdict = if *b == self.bottleneck {
                "match"
            } else {
                "MISMATCH"
            };
            write!(f, "\noracle points {points:?} bottleneck {b} s: {verdict}")?;
        }
        Ok(())
    }
}

/// Solves one partition instance. Capacities default to 1 and bandwidths to
/// unlimited.
pub fn cmd_plan(plan: &PlanConfig, oracle: bool) -> Result<PlanReport, Error> {
    let n = plan.stages;
    let profile = LayerProfile::new(plan.exec_time.clone(), plan.output_size.clone())?;
    let caps = match &plan.capacities {
        Some(c) => CapacityEstimate::new(c.clone())?,
        None => CapacityEstimate::uniform(n),
    };
    let bws = match &plan.bandwidths {
        Some(b) => BandwidthMatrix::new(b.clone())?,
        None => BandwidthMatrix::uniform(n, f64::INFINITY),
    };
    let (points, bottleneck) = optimal_partition(&profile, &caps, &bws, n)?;
    debug_assert_eq!(
        evaluate_partition(&profile, &caps, &bws, &points)?,
        bottleneck
    );
    let rows = points
        .all_bounds()
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| StageRow {
            stage: i,
            start,
            end,
            compute: caps.get(i) * profile.stage_time(start, end),
            comm: (i + 1 < n).then(|| 2.0 * profile.output_size[end] as f64 / bws.get(i)),
        })
        .collect();
    let oracle = if oracle {
        Some(brute_force_partition(&profile, &caps, &bws, n)?)
    } else {
        None
    };
    Ok(PlanReport {
        points,
        bottleneck,
        rows,
        oracle,
    })
}

/// Checks a metrics log against the scheduling and recovery invariants.
pub fn cmd_verify(metrics: &Path) -> Result<VerifyReport, Error> {
    let records = read_records(BufReader::new(File::open(metrics)?))?;
    Ok(verify_records(&records))
}
