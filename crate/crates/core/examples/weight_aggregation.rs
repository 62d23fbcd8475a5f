//! Aggregation of concurrent weight lineages, and its effect on accuracy.
//!
//! `cargo run --release --example weight_aggregation`

use edgepipe::config::ExperimentConfig;
use edgepipe::metrics::EventKind;

fn run(aggregation: bool) -> Result<(f64, Vec<String>), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(&format!(
        "epochs = 10\n[pipeline]\naggregation = {aggregation}\n[sim]\nflops = 2e7\n[[nodes]]\n[[nodes]]\n[[nodes]]\n"
    ))?;
    let mut sim = cfg.simulation()?;
    let out = sim.run()?;
    let aggs = out
        .records
        .iter()
        .filter(|r| r.event == EventKind::Agg)
        .take(6)
        .map(|r| {
            format!(
                "stage {} batch {} width {:?}: {}",
                r.stage,
                r.batch_id,
                r.count,
                r.detail.as_deref().unwrap_or("")
            )
        })
        .collect();
    let acc = cfg
        .dataset()?
        .accuracy(&cfg.stack()?, &sim.assembled_weights()?)?;
    Ok((acc, aggs))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (with, aggs) = run(true)?;
    for a in aggs {
        println!("{a}");
    }
    let (without, _) = run(false)?;
    println!("accuracy {with:.4} with aggregation, {without:.4} without");
    Ok(())
}
