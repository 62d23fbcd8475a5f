//! One node ten times slower: re-partitioning against a frozen uniform split.
//!
//! `cargo run --release --example heterogeneous_speedup`

use edgepipe::config::ExperimentConfig;
use edgepipe::harness::{execute, steady_period};
use edgepipe::metrics::EventKind;

const CONFIG: &str = r#"
batches = 600

[sim]
flops = 2e7

[[nodes]]
[[nodes]]
capacity = 10.0
[[nodes]]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let dynamic = execute(&cfg, 0, None)?;

    let mut frozen_cfg = cfg.clone();
    frozen_cfg.pipeline.dynamic_partition = false;
    let frozen = execute(&frozen_cfg, 0, None)?;

    for r in dynamic
        .records
        .iter()
        .filter(|r| r.event == EventKind::Repart && r.worker == 0)
    {
        println!(
            "batch {:>3}: points {:?}",
            r.batch_id,
            r.points.as_deref().unwrap_or(&[])
        );
    }
    let d = steady_period(&dynamic.records).ok_or("no period")?;
    let f = steady_period(&frozen.records).ok_or("no period")?;
    println!(
        "dynamic {d:.5} s per batch, frozen {f:.5} s, ratio {:.3}",
        d / f
    );
    println!(
        "total virtual time {:.2} s vs {:.2} s",
        dynamic.elapsed, frozen.elapsed
    );
    Ok(())
}
