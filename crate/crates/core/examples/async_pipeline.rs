//! Trains across three simulated nodes and checks the schedule the log records.
//!
//! `cargo run --example async_pipeline`

use edgepipe::config::ExperimentConfig;
use edgepipe::harness::{steady_period, trailing_loss};
use edgepipe::metrics::EventKind;
use edgepipe::verify::verify_records;

const CONFIG: &str = r#"
batches = 200

[sim]
flops = 2e7

[[nodes]]
[[nodes]]
[[nodes]]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let mut sim = cfg.simulation()?;
    let out = sim.run()?;

    // the first batches on each stage: warm-up forwards, then F and B alternate
    for stage in 0..3 {
        let seq: String = out
            .records
            .iter()
            .filter(|r| r.stage == stage && matches!(r.event, EventKind::F | EventKind::B))
            .take(12)
            .map(|r| format!("{}{} ", r.event, r.batch_id))
            .collect();
        println!("stage {stage}: {seq}...");
    }

    let w = sim.assembled_weights()?;
    let acc = cfg.dataset()?.accuracy(&cfg.stack()?, &w)?;
    println!("virtual time {:.3} s", out.end_time);
    println!(
        "period {:.5} s per batch",
        steady_period(&out.records).unwrap_or(f64::NAN)
    );
    println!(
        "loss {:.4}, accuracy {acc:.3}",
        trailing_loss(&out.records, 10).unwrap_or(f64::NAN)
    );
    print!("{}", verify_records(&out.records));
    Ok(())
}
