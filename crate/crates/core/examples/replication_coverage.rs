//! Shows which backups each node holds and that losing any one worker loses no layer.
//!
//! `cargo run --example replication_coverage`

use std::collections::BTreeSet;

use edgepipe::config::ExperimentConfig;

const CONFIG: &str = r#"
batches = 160

[sim]
flops = 2e7

[[nodes]]
[[nodes]]
[[nodes]]
[[nodes]]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let mut sim = cfg.simulation()?;
    // stop mid-run, after the first global round
    sim.run_until(|s| s.records().iter().any(|r| r.batch_id >= 130))?;

    let layers = cfg.stack()?.len();
    let ids: Vec<u32> = (0..cfg.nodes.len() as u32).collect();
    for &id in &ids {
        let node = sim.node(id).ok_or("missing node")?;
        let live = node.executor().map(|e| (e.start(), e.end()));
        let store = node.replicas();
        let chain: Vec<String> = store
            .chain_snapshots()
            .map(|s| {
                format!(
                    "stage {} layers {}..={} @{}",
                    s.origin_stage,
                    s.weights.start(),
                    s.weights.end(),
                    s.at_batch
                )
            })
            .collect();
        let global = store.global_snapshots().count();
        println!(
            "node {id}: live {live:?}, chain [{}], {global} global",
            chain.join(", ")
        );
    }

    for dead in 1..cfg.nodes.len() as u32 {
        let mut covered = BTreeSet::new();
        for &id in ids.iter().filter(|i| **i != dead) {
            let node = sim.node(id).ok_or("missing node")?;
            if let Some(e) = node.executor() {
                covered.extend(e.start()..=e.end());
            }
            let store = node.replicas();
            for s in store.chain_snapshots().chain(store.global_snapshots()) {
                covered.extend(s.weights.start()..=s.weights.end());
            }
        }
        println!(
            "without node {dead}: {} of {layers} layers recoverable",
            covered.len()
        );
    }
    Ok(())
}
