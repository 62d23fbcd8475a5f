//! Three nodes as threads talking over loopback TCP, with one killed mid-run.
//!
//! `cargo run --release --example live_training`

use edgepipe::config::ExperimentConfig;
use edgepipe::harness::execute;
use edgepipe::metrics::EventKind;
use edgepipe::verify::verify_records;

const CONFIG: &str = r#"
mode = "live"
batches = 120

[live]
probe_bytes = 65536
max_seconds = 120.0

[[nodes]]
[[nodes]]
capacity = 2.0
[[nodes]]

[[faults]]
at_batch = 60
action = "kill"
node = 2
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    let art = execute(&cfg, 0, None)?;
    for r in art.records.iter().filter(|r| {
        r.worker == 0
            && matches!(
                r.event,
                EventKind::Repart | EventKind::Fault | EventKind::Recover
            )
    }) {
        println!(
            "{:.3} s  {} batch {} points {:?}",
            r.t,
            r.event,
            r.batch_id,
            r.points.as_deref().unwrap_or(&[])
        );
    }
    println!(
        "{:.2} s wall clock, {} records",
        art.elapsed,
        art.records.len()
    );
    if let Some(w) = &art.weights {
        println!("accuracy {:.3}", cfg.dataset()?.accuracy(&cfg.stack()?, w)?);
    }
    print!("{}", verify_records(&art.records));
    Ok(())
}
