//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::gradients::{self, PROBES};
use common::{bundled, central, config, holdings, kill_and_compare, nodes, window_loss};
use edgepipe::clock::VirtualExecution;
use edgepipe::config::ExperimentConfig;
use edgepipe::harness::{cmd_run, cmd_verify, execute, steady_period};
use edgepipe::metrics::{EventKind, MetricsRecord};
use edgepipe::model::{backward_range, forward_range, sgd_step, SgdState, WeightSet};
use edgepipe::partitioner::{optimal_partition, oracle::brute_force_partition};
use edgepipe::pipeline::{BatchMeta, StageExecutor};
use edgepipe::profiler::{BandwidthMatrix, CapacityEstimate, LayerProfile};
use edgepipe::simulation::Simulation;
use edgepipe::tensor::Tensor;
use edgepipe::verify::verify_records;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Dynamic program against exhaustive search on random small instances.
fn partition_optimality() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| 10f64.powf(rng.random_range(lo..hi));
    for case in 0..1000 {
        let layers = rng.random_range(1..=8);
        let n = rng.random_range(1..=layers.min(4));
        let times = (0..layers)
            .map(|_| log_uniform(&mut rng, -3.0, 1.0))
            .collect();
        let sizes = (0..layers)
            .map(|_| log_uniform(&mut rng, 2.0, 7.0) as u64)
            .collect();
        let caps = (0..n).map(|_| log_uniform(&mut rng, -1.0, 1.0)).collect();
        let bws = (0..n.max(2) - 1)
            .map(|_| log_uniform(&mut rng, 5.0, 9.0))
            .collect();
        let profile = LayerProfile::new(times, sizes).map_err(err)?;
        let caps = CapacityEstimate::new(caps).map_err(err)?;
        let bws = BandwidthMatrix::new(bws).map_err(err)?;
        let (_, dp) = optimal_partition(&profile, &caps, &bws, n).map_err(err)?;
        let (_, brute) = brute_force_partition(&profile, &caps, &bws, n).map_err(err)?;
        ensure(
            dp == brute,
            format!("instance {case}: dp {dp} vs exhaustive {brute}"),
        )?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("1000 instances identical in {secs:.2} s"))
}

/// A three-stage run's log passes every trace check.
fn trace_invariants() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = config(&format!("batches = 300\n[sim]\nflops = 2e7\n{}", nodes(3)));
    cfg.out = Some(dir.path().join("three.jsonl").display().to_string());
    let summary = cmd_run(&cfg).map_err(err)?;
    let report = cmd_verify(&summary.metrics).map_err(err)?;
    ensure(report.passed(), report.to_string())?;
    Ok(format!("{} records, all checks clean", report.records))
}

/// One node trains exactly like a plain SGD loop.
fn single_node_equivalence() -> Outcome {
    let cfg = config(&format!("batches = 100\n{}", nodes(1)));
    let mut sim = cfg.simulation().map_err(err)?;
    let out = sim.run().map_err(err)?;
    ensure(out.finished, "run did not finish")?;
    let pipelined = sim.assembled_weights().map_err(err)?;

    let stack = cfg.stack().map_err(err)?;
    let data = cfg.dataset().map_err(err)?;
    let mut w = cfg.initial_weights(&stack);
    let mut state = SgdState::zeros_for(&w);
    let last = stack.len() - 1;
    for b in 0..100 {
        let (x, y) = data.batch(b);
        let (_, rec) = forward_range(&stack, &w, &x, 0, last, Some(&y)).map_err(err)?;
        let (g, _) = backward_range(&stack, &w, &rec, &Tensor::scalar(1.0)).map_err(err)?;
        w = sgd_step(&w, &g, &mut state, &cfg.sgd()).map_err(err)?;
    }
    let diff = pipelined.max_abs_diff(&w);
    ensure(diff <= 1e-12, format!("max abs difference {diff:e}"))?;
    Ok(format!("max abs difference {diff:e} after 100 batches"))
}

/// Analytic gradients against central differences.
fn gradient_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    for probe in PROBES {
        for seed in 0..50 {
            let e = gradients::check(probe, seed);
            ensure(
                e < gradients::TOLERANCE,
                format!("{probe:?} seed {seed}: {e:e}"),
            )?;
            worst = worst.max(e);
        }
    }
    Ok(format!("150 cases, worst relative error {worst:.2e}"))
}

/// Dynamic re-partitioning against the frozen uniform split with one node ten
/// times slower.
fn heterogeneous_speedup() -> Outcome {
    let cfg = bundled("hetero10x");
    let dynamic =
        steady_period(&execute(&cfg, 0, None).map_err(err)?.records).ok_or("no period")?;
    let mut frozen_cfg = cfg.clone();
    frozen_cfg.pipeline.dynamic_partition = false;
    let frozen =
        steady_period(&execute(&frozen_cfg, 0, None).map_err(err)?.records).ok_or("no period")?;
    let ratio = dynamic / frozen;
    ensure(ratio <= 0.5, format!("ratio {ratio:.4}"))?;
    Ok(format!(
        "period {dynamic:.5} s vs {frozen:.5} s frozen, ratio {ratio:.4}"
    ))
}

/// Killing nodes mid-run: layouts stay whole, weights come back exactly, and
/// training keeps improving.
fn fault_recovery() -> Outcome {
    let mut details = Vec::new();
    for name in ["fault-single", "fault-multi"] {
        let report = kill_and_compare(&bundled(name));
        let verify = verify_records(&report.records);
        ensure(verify.passed(), format!("{name}: {verify}"))?;
        ensure(
            report.mismatched.is_empty(),
            format!(
                "{name}: layers {:?} differ from their source",
                report.mismatched
            ),
        )?;
        ensure(
            !report.restored.is_empty(),
            format!("{name}: nothing restored from backup"),
        )?;
        let b = report.fault_batch;
        let before = window_loss(&report.records, b - 10, b);
        let after = window_loss(&report.records, b + 40, b + 50);
        ensure(
            after < before,
            format!("{name}: loss {before:.4} then {after:.4}"),
        )?;
        details.push(format!(
            "{name} restored {:?}, loss {before:.3} -> {after:.3}",
            report.restored
        ));
    }
    Ok(details.join("; "))
}

/// Median time per batch after the recovery finished.
fn period_after_recovery(records: &[MetricsRecord]) -> Option<f64> {
    let t0 = central(records, EventKind::Recover).last()?.t;
    let tail: Vec<MetricsRecord> = records.iter().filter(|r| r.t > t0).cloned().collect();
    steady_period(&tail)
}

/// Re-planning after a failure never loses to handing the failed stage to its
/// neighbour.
fn redistribution_vs_absorbing() -> Outcome {
    let mut details = Vec::new();
    for (node, strictly) in [(3u32, true), (1, false)] {
        let mut periods = BTreeMap::new();
        let mut layers = 0;
        for strategy in ["redistribute", "successor_absorbs"] {
            let cfg = config(&format!(
                "batches = 300\n[pipeline]\ndynamic_partition = false\n[fault]\nstrategy = \"{strategy}\"\n\
                 [sim]\nflops = 2e7\n{}\n[[faults]]\nat_batch = 100\naction = \"kill\"\nnode = {node}\n",
                nodes(4)
            ));
            let mut sim = cfg.simulation().map_err(err)?;
            let out = sim.run().map_err(err)?;
            ensure(out.finished, format!("{strategy} run did not finish"))?;
            let verify = verify_records(&out.records);
            ensure(verify.passed(), format!("{strategy}: {verify}"))?;
            layers = out
                .records
                .iter()
                .find(|r| r.event == EventKind::Repart && r.worker == node)
                .and_then(|r| r.layers)
                .map_or(0, |[s, e]| e + 1 - s);
            periods.insert(
                strategy,
                period_after_recovery(&out.records).ok_or("no period")?,
            );
        }
        let (re, ab) = (periods["redistribute"], periods["successor_absorbs"]);
        ensure(
            re <= ab * (1.0 + 1e-9),
            format!("node {node}: redistribute {re} > absorbing {ab}"),
        )?;
        ensure(
            strictly == (layers >= 2),
            format!("node {node} held {layers} layers"),
        )?;
        if strictly {
            ensure(
                re < ab,
                format!("node {node} held {layers} layers but {re} == {ab}"),
            )?;
        }
        details.push(format!(
            "node {node} ({layers} layers) {re:.5} vs {ab:.5} s"
        ));
    }
    Ok(details.join("; "))
}

/// Aggregation fires only on its schedule, averages exactly, and does not
/// hurt accuracy.
fn weight_aggregation() -> Outcome {
    // schedule: every AGG at stage i of n has width n-i and a clock on a multiple of it
    let base = 2;
    let cfg = config(&format!(
        "batches = 120\n[pipeline]\ndynamic_partition = false\naggregation_base_interval = {base}\n[sim]\nflops = 2e7\n{}",
        nodes(3)
    ));
    let out = cfg.simulation().map_err(err)?.run().map_err(err)?;
    let mut aggs = 0;
    for r in out.records.iter().filter(|r| r.event == EventKind::Agg) {
        let k = 3 - r.stage as u64;
        let clock: u64 = r
            .detail
            .as_deref()
            .and_then(|d| d.split_whitespace().nth(1))
            .and_then(|c| c.parse().ok())
            .ok_or("AGG without clock")?;
        ensure(
            r.count == Some(k),
            format!("stage {} aggregated {:?} lineages", r.stage, r.count),
        )?;
        ensure(
            clock.is_multiple_of(k * base),
            format!("stage {} aggregated at clock {clock}", r.stage),
        )?;
        aggs += 1;
    }
    ensure(aggs > 0, "no aggregation happened")?;

    // exact mean, against an elementwise average computed here
    let stack = Arc::new(cfg.stack().map_err(err)?);
    let data = cfg.dataset().map_err(err)?;
    let mut exec = StageExecutor::new(
        stack.clone(),
        0,
        3,
        cfg.initial_weights(&stack),
        0,
        cfg.sgd(),
        &cfg.pipeline,
    );
    let mut clock = VirtualExecution::new(cfg.layer_costs(&stack), 1.0);
    let mut checked = 0;
    for b in 0..24 {
        let (x, y) = data.batch(b);
        let mut meta = BatchMeta::new(b);
        exec.forward_batch(&mut meta, &x, Some(&y), &mut clock)
            .map_err(err)?;
        let done = exec
            .backward_batch(b, &Tensor::scalar(1.0), &mut clock)
            .map_err(err)?;
        if let Some(agg) = done.aggregated {
            ensure(agg.clock % (3 * base) == 0, format!("clock {}", agg.clock))?;
            let want = mean_of(&agg.inputs);
            let diff = agg.result.max_abs_diff(&want);
            ensure(diff <= 1e-15, format!("aggregate off the mean by {diff:e}"))?;
            ensure(
                Arc::ptr_eq(exec.current(), &agg.result),
                "aggregate not adopted",
            )?;
            checked += 1;
        }
    }
    ensure(
        checked == 24 / (3 * base as usize),
        format!("{checked} aggregations"),
    )?;

    // accuracy over five seeds
    let mut acc = BTreeMap::new();
    for on in [true, false] {
        let mut sum = 0.0;
        for seed in 1..=5 {
            let cfg = config(&format!(
                "seed = {seed}\nepochs = 30\n[data]\nsamples = 2000\n[pipeline]\naggregation = {on}\n\
                 [sim]\nflops = 2e7\n{}",
                nodes(3)
            ));
            let mut sim = cfg.simulation().map_err(err)?;
            sim.run().map_err(err)?;
            let w = sim.assembled_weights().map_err(err)?;
            sum += cfg
                .dataset()
                .map_err(err)?
                .accuracy(&cfg.stack().map_err(err)?, &w)
                .map_err(err)?;
        }
        acc.insert(on, sum / 5.0);
    }
    let (with, without) = (acc[&true], acc[&false]);
    ensure(
        with >= without,
        format!("mean accuracy {with:.4} with aggregation, {without:.4} without"),
    )?;
    Ok(format!(
        "{aggs} AGG records on schedule, {checked} exact means, accuracy {with:.4} vs {without:.4}"
    ))
}

fn mean_of(sets: &[Arc<WeightSet>]) -> WeightSet {
    let k = sets.len() as f64;
    let params = (0..sets[0].params().len())
        .map(|j| {
            sets[0].params()[j].as_ref().map(|first| {
                let mut p = first.clone();
                for (t, field) in [(&mut p.w, 0), (&mut p.b, 1)] {
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        let total: f64 = sets
                            .iter()
                            .map(|s| {
                                let q = s.params()[j].as_ref().expect("same layout");
                                if field == 0 {
                                    q.w.data()[i]
                                } else {
                                    q.b.data()[i]
                                }
                            })
                            .sum();
                        *v = total / k;
                    }
                }
                p
            })
        })
        .collect();
    WeightSet::new(0, sets[0].start(), params).expect("non-empty")
}

/// Whatever single node dies after batch 100, every layer survives somewhere.
fn replication_coverage() -> Outcome {
    // every batch boundary from 100 on, every worker hypothetically lost
    let cfg = config(&format!("batches = 300\n[sim]\nflops = 2e7\n{}", nodes(4)));
    let layers = cfg.stack().map_err(err)?.len();
    let uncovered = |s: &Simulation| {
        for dead in 1..4u32 {
            let alive: Vec<u32> = (0..4).filter(|i| *i != dead).collect();
            let held = holdings(s, &alive);
            if let Some(l) =
                (0..layers).find(|l| !held.live.contains_key(l) && !held.backups.contains_key(l))
            {
                return Some(format!(
                    "losing node {dead} at t={:.3} loses layer {l}",
                    s.now()
                ));
            }
        }
        None
    };
    let mut sim = cfg.simulation().map_err(err)?;
    let (mut seen, mut boundaries, mut lost) = (0, 0, None);
    sim.run_until(|s| {
        let fresh = s.records()[seen..]
            .iter()
            .any(|r| r.event == EventKind::B && r.stage == 0 && r.batch_id >= 100);
        seen = s.records().len();
        if fresh {
            boundaries += 1;
            lost = uncovered(s);
        }
        lost.is_some()
    })
    .map_err(err)?;
    // the run stops right after the last backward, before the predicate sees it
    if lost.is_none() && sim.is_finished() {
        boundaries += 1;
        lost = uncovered(&sim);
    }
    if let Some(why) = lost {
        return Err(why);
    }
    ensure(
        boundaries == 200,
        format!("{boundaries} boundaries checked, expected 200"),
    )?;

    let mut cases = 0;
    for node in 1..4u32 {
        for at in [100, 137, 150, 201, 260] {
            let cfg = config(&format!(
                "batches = 300\n[sim]\nflops = 2e7\n{}\n[[faults]]\nat_batch = {at}\naction = \"kill\"\nnode = {node}\n",
                nodes(4)
            ));
            let mut sim = cfg.simulation().map_err(err)?;
            let layers = cfg.stack().map_err(err)?.len();
            let fired = sim
                .run_until(|s| !central(s.records(), EventKind::Fault).is_empty())
                .map_err(err)?;
            ensure(fired, format!("kill of {node} at {at} not detected"))?;
            let held = holdings(&sim, &[0, 1, 2, 3]);
            for l in 0..layers {
                ensure(
                    held.live.contains_key(&l) || held.backups.contains_key(&l),
                    format!("kill of {node} at {at}: layer {l} lost"),
                )?;
            }
            let out = {
                sim.run().map_err(err)?;
                sim.outcome()
            };
            ensure(
                out.finished,
                format!("kill of {node} at {at}: did not finish"),
            )?;
            cases += 1;
        }
    }
    Ok(format!(
        "{boundaries} batch boundaries x 3 workers covered; {cases} real kills recovered"
    ))
}

/// Two runs of one config write byte-identical logs.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut bytes = Vec::new();
    for i in 0..2 {
        let mut cfg: ExperimentConfig = bundled("fault-single");
        cfg.out = Some(
            dir.path()
                .join(format!("run{i}.jsonl"))
                .display()
                .to_string(),
        );
        let s = cmd_run(&cfg).map_err(err)?;
        bytes.push(std::fs::read(&s.metrics).map_err(err)?);
    }
    ensure(bytes[0] == bytes[1], "metrics files differ")?;
    Ok(format!("{} bytes identical", bytes[0].len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("partition optimality", partition_optimality),
        ("trace invariants", trace_invariants),
        ("single-node equivalence", single_node_equivalence),
        ("gradient checks", gradient_checks),
        ("heterogeneous speedup", heterogeneous_speedup),
        ("fault recovery", fault_recovery),
        ("redistribution vs absorbing", redistribution_vs_absorbing),
        ("weight aggregation", weight_aggregation),
        ("replication coverage", replication_coverage),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
