//! Plans a layer split for a profiled model and checks it by exhaustive search.
//!
//! `cargo run --example partition_plan`

use edgepipe::partitioner::{evaluate_partition, optimal_partition, oracle::brute_force_partition};
use edgepipe::profiler::{BandwidthMatrix, CapacityEstimate, LayerProfile};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // seconds per layer on the central node, bytes each layer emits
    let profile = LayerProfile::new(
        vec![0.012, 0.002, 0.020, 0.002, 0.008, 0.001],
        vec![40_000, 40_000, 20_000, 20_000, 4_000, 8],
    )?;
    // the second worker is three times slower, the link to the last one is thin
    let caps = CapacityEstimate::new(vec![1.0, 3.0, 1.0])?;
    let bws = BandwidthMatrix::new(vec![50e6, 5e6])?;

    let (points, bottleneck) = optimal_partition(&profile, &caps, &bws, 3)?;
    println!("points {:?}, bottleneck {bottleneck:.4} s", points.points());
    for (i, (s, e)) in points.all_bounds().into_iter().enumerate() {
        println!(
            "  stage {i}: layers {s}..={e}, {:.4} s",
            caps.get(i) * profile.stage_time(s, e)
        );
    }

    let uniform = optimal_partition(&profile, &CapacityEstimate::uniform(3), &bws, 3)?.0;
    let naive = evaluate_partition(&profile, &caps, &bws, &uniform)?;
    println!(
        "capacity-blind split {:?} would take {naive:.4} s",
        uniform.points()
    );

    let (brute, best) = brute_force_partition(&profile, &caps, &bws, 3)?;
    assert_eq!(best, bottleneck);
    println!("exhaustive search agrees: {brute:?} at {best:.4} s");
    Ok(())
}
