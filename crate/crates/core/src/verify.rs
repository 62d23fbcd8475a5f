//! Trace checker over a metrics log.
//!
//! Checks, per generation:
//! - 1F1B: once a stage has run its first backward, passes alternate until its
//!   last forward, after which only backwards remain;
//! - stashing: a batch's backward ran with the version its forward used;
//! - vertical sync: every stage forwarded a batch pinned to the same version;
//! - in-flight bound: stage-0 forwards minus backwards never exceed the logged limit;
//! - layer conservation: the stage ranges logged at a re-partition or recovery
//!   cover every layer exactly once. Only generations that completed a backward
//!   pass are held to this; a layout whose commit never reached every stage
//!   stalls before any backward and is superseded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::metrics::{EventKind, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Check {
    OneFOneB,
    Stashing,
    VerticalSync,
    InFlight,
    LayerConservation,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::OneFOneB,
        Check::Stashing,
        Check::VerticalSync,
        Check::InFlight,
        Check::LayerConservation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::OneFOneB => "1F1B",
            Check::Stashing => "weight stashing",
            Check::VerticalSync => "vertical sync",
            Check::InFlight => "in-flight bound",
            Check::LayerConservation => "layer conservation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub check: Check,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerifyReport {
    pub records: usize,
    /// Items examined per check.
    pub examined: BTreeMap<Check, usize>,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: Check) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }

    fn flag(&mut self, check: Check, message: String) {
        self.violations.push(Violation { check, message });
    }

    fn examine(&mut self, check: Check, n: usize) {
        *self.examined.entry(check).or_default() += n;
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} records", self.records)?;
        for c in Check::ALL {
            let n = self.count(c);
            let seen = self.examined.get(&c).copied().unwrap_or(0);
            let verdict = if n == 0 {
                "ok".to_string()
            } else {
                format!("{n} violations")
            };
            writeln!(f, "{:<20} {verdict} ({seen} examined)", c.name())?;
        }
        for v in self.violations.iter().take(20) {
            writeln!(f, "  {}: {}", v.check.name(), v.message)?;
        }
        if self.violations.len() > 20 {
            writeln!(f, "  ... {} more", self.violations.len() - 20)?;
        }
        Ok(())
    }
}

pub fn verify_records(records: &[MetricsRecord]) -> VerifyReport {
    let mut report = VerifyReport {
        records: records.len(),
        ..Default::default()
    };
    let passes: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| matches!(r.event, EventKind::F | EventKind::B))
        .collect();
    check_alternation(&passes, &mut report);
    check_stashing(&passes, &mut report);
    check_vertical_sync(&passes, &mut report);
    check_in_flight(&passes, &mut report);
    check_conservation(records, &mut report);
    report
}

/// Passes of one stage of one worker in one generation, in log order.
fn sequences<'a>(
    passes: &[&'a MetricsRecord],
) -> BTreeMap<(u64, u32, usize), Vec<&'a MetricsRecord>> {
    let mut groups: BTreeMap<(u64, u32, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in passes {
        groups
            .entry((r.generation, r.worker, r.stage))
            .or_default()
            .push(r);
    }
    groups
}

fn check_alternation(passes: &[&MetricsRecord], report: &mut VerifyReport) {
    for ((gen, worker, stage), seq) in sequences(passes) {
        report.examine(Check::OneFOneB, 1);
        let first_b = seq.iter().position(|r| r.event == EventKind::B);
        let last_f = seq.iter().rposition(|r| r.event == EventKind::F);
        let (Some(first_b), Some(last_f)) = (first_b, last_f) else {
            continue;
        };
        for i in first_b + 1..seq.len() {
            let (prev, cur) = (seq[i - 1].event, seq[i].event);
            let bad = if i <= last_f {
                prev == cur
            } else {
                cur != EventKind::B
            };
            if bad {
                report.flag(
                    Check::OneFOneB,
                    format!(
                        "worker {worker} stage {stage} gen {gen}: {prev}{cur} at batch {}",
                        seq[i].batch_id
                    ),
                );
            }
        }
    }
}

fn check_stashing(passes: &[&MetricsRecord], report: &mut VerifyReport) {
    let mut forwards: BTreeMap<(u64, u32, usize, i64), u64> = BTreeMap::new();
    for r in passes.iter().filter(|r| r.event == EventKind::F) {
        forwards.insert((r.generation, r.worker, r.stage, r.batch_id), r.version);
    }
    for r in passes.iter().filter(|r| r.event == EventKind::B) {
        report.examine(Check::Stashing, 1);
        match forwards.get(&(r.generation, r.worker, r.stage, r.batch_id)) {
            Some(v) if *v == r.version => {}
            Some(v) => report.flag(
                Check::Stashing,
                format!(
                    "worker {} stage {} batch {}: forward v{v}, backward v{}",
                    r.worker, r.stage, r.batch_id, r.version
                ),
            ),
            None => report.flag(
                Check::Stashing,
                format!(
                    "worker {} stage {} batch {}: backward without forward",
                    r.worker, r.stage, r.batch_id
                ),
            ),
        }
    }
}

fn check_vertical_sync(passes: &[&MetricsRecord], report: &mut VerifyReport) {
    // (generation, batch) -> (stage, pinned version) of every forward
    type Pins = BTreeMap<(u64, i64), Vec<(usize, Option<u64>)>>;
    let mut pins = Pins::new();
    for r in passes.iter().filter(|r| r.event == EventKind::F) {
        pins.entry((r.generation, r.batch_id))
            .or_default()
            .push((r.stage, r.pinned));
    }
    for ((gen, batch), stages) in pins {
        report.examine(Check::VerticalSync, 1);
        let first = stages[0].1;
        if first.is_none() || stages.iter().any(|(_, p)| *p != first) {
            report.flag(
                Check::VerticalSync,
                format!("gen {gen} batch {batch}: pins {stages:?}"),
            );
        }
    }
}

fn check_in_flight(passes: &[&MetricsRecord], report: &mut VerifyReport) {
    let mut open: BTreeMap<u64, i64> = BTreeMap::new();
    for r in passes.iter().filter(|r| r.stage == 0) {
        report.examine(Check::InFlight, 1);
        let n = open.entry(r.generation).or_default();
        match r.event {
            EventKind::F => *n += 1,
            _ => *n -= 1,
        }
        match r.limit {
            Some(limit) if *n > limit as i64 => report.flag(
                Check::InFlight,
                format!(
                    "gen {} batch {}: {n} in flight, limit {limit}",
                    r.generation, r.batch_id
                ),
            ),
            Some(_) => {}
            None => report.flag(
                Check::InFlight,
                format!("batch {}: stage-0 record without limit", r.batch_id),
            ),
        }
    }
}

fn check_conservation(records: &[MetricsRecord], report: &mut VerifyReport) {
    let mut groups: BTreeMap<u64, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| matches!(r.event, EventKind::Repart | EventKind::Recover))
    {
        groups.entry(r.generation).or_default().push(r);
    }
    let trained: BTreeSet<u64> = records
        .iter()
        .filter(|r| r.event == EventKind::B)
        .map(|r| r.generation)
        .collect();
    for (gen, recs) in groups {
        if !trained.contains(&gen) {
            continue;
        }
        report.examine(Check::LayerConservation, 1);
        let Some(total) = recs[0].count else {
            report.flag(
                Check::LayerConservation,
                format!("gen {gen}: layer count missing"),
            );
            continue;
        };
        let mut ranges: Vec<(usize, usize, usize)> = Vec::new();
        for r in &recs {
            match r.layers {
                Some([s, e]) => ranges.push((s, e, r.stage)),
                None => report.flag(
                    Check::LayerConservation,
                    format!("gen {gen}: stage {} without layers", r.stage),
                ),
            }
        }
        ranges.sort_unstable();
        let mut next = 0;
        let mut ok = true;
        for (i, (s, e, stage)) in ranges.iter().enumerate() {
            if *s != next || *stage != i {
                ok = false;
            }
            next = e + 1;
        }
        if next as u64 != total {
            ok = false;
        }
        if let Some(points) = &recs[0].points {
            let implied: Vec<usize> = ranges
                .iter()
                .take(ranges.len().saturating_sub(1))
                .map(|r| r.1)
                .collect();
            if *points != implied || recs.iter().any(|r| r.points.as_ref() != Some(points)) {
                ok = false;
            }
        }
        if !ok {
            let got: Vec<[usize; 2]> = ranges.iter().map(|r| [r.0, r.1]).collect();
            report.flag(
                Check::LayerConservation,
                format!("gen {gen}: ranges {got:?} do not tile {total} layers"),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pass(stage: usize, event: EventKind, batch: i64, version: u64) -> MetricsRecord {
        let mut r = MetricsRecord::new(0.0, stage, stage as u32, event, batch, 1)
            .version(version)
            .pinned(0);
        if stage == 0 {
            r = r.limit(2);
        }
        r
    }

    #[test]
    fn alternation_violation_found() {
        let recs = vec![
            pass(1, EventKind::F, 0, 0),
            pass(1, EventKind::B, 0, 0),
            pass(1, EventKind::F, 1, 1),
            pass(1, EventKind::F, 2, 1),
            pass(1, EventKind::B, 1, 1),
            pass(1, EventKind::B, 2, 1),
        ];
        let r = verify_records(&recs);
        assert_eq!(r.count(Check::OneFOneB), 1);
        assert_eq!(r.count(Check::Stashing), 0);
    }

    #[test]
    fn in_flight_limit_enforced() {
        let recs = vec![
            pass(0, EventKind::F, 0, 0),
            pass(0, EventKind::F, 1, 0),
            pass(0, EventKind::F, 2, 0),
        ];
        assert_eq!(verify_records(&recs).count(Check::InFlight), 1);
    }

    #[test]
    fn conservation_detects_gap() {
        let rec = |stage, s, e| {
            MetricsRecord::new(0.0, stage, stage as u32, EventKind::Recover, 5, 3)
                .layers(s, e)
                .count(6)
                .points(&[1, 3])
        };
        let fwd = MetricsRecord::new(1.0, 2, 2, EventKind::F, 5, 3)
            .version(0)
            .pinned(0);
        let back = MetricsRecord::new(1.0, 2, 2, EventKind::B, 5, 3)
            .version(0)
            .pinned(0);
        let good = vec![rec(0, 0, 1), rec(1, 2, 3), rec(2, 4, 5), fwd, back.clone()];
        assert!(verify_records(&good).passed());
        let bad = vec![rec(0, 0, 1), rec(1, 2, 2), rec(2, 4, 5), back.clone()];
        assert_eq!(verify_records(&bad).count(Check::LayerConservation), 1);
        // never trained under: not held to conservation
        let abandoned = vec![rec(0, 0, 1), rec(1, 2, 2)];
        assert!(verify_records(&abandoned).passed());
    }
}
