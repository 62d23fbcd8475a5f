//! Kills a worker mid-run and follows detection, re-planning and recovery.
//!
//! `cargo run --example fault_recovery`

use edgepipe::config::ExperimentConfig;
use edgepipe::metrics::EventKind;
use edgepipe::verify::verify_records;

const CONFIG: &str = r#"
batches = 300

[sim]
flops = 2e7

[[nodes]]
[[nodes]]
[[nodes]]
[[nodes]]

[[faults]]
at_batch = 150
action = "kill"
node = 1
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let mut sim = cfg.simulation()?;

    sim.run_until(|s| s.records().iter().any(|r| r.event == EventKind::Fault))?;
    println!(
        "t={:.3}: fault detected, roster {:?}",
        sim.now(),
        sim.central().roster()
    );

    let out = sim.run()?;
    for r in out
        .records
        .iter()
        .filter(|r| matches!(r.event, EventKind::Fault | EventKind::Recover))
    {
        println!(
            "t={:.3} worker {} {} batch {} layers {:?} {}",
            r.t,
            r.worker,
            r.event,
            r.batch_id,
            r.layers,
            r.detail.as_deref().unwrap_or("")
        );
    }
    println!(
        "roster after recovery {:?}, points {:?}",
        sim.central().roster(),
        sim.central().points().map(|p| p.points().to_vec())
    );

    let acc = cfg
        .dataset()?
        .accuracy(&cfg.stack()?, &sim.assembled_weights()?)?;
    println!("finished: {}, accuracy {acc:.3}", out.finished);
    print!("{}", verify_records(&out.records));
    Ok(())
}
