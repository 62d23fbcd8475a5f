use edgepipe::partitioner::{
    evaluate_partition, optimal_partition, oracle::brute_force_partition, PartitionPoints,
};
use edgepipe::profiler::{BandwidthMatrix, CapacityEstimate, LayerProfile};
use proptest::prelude::*;

fn log_uniform() -> impl Strategy<Value = f64> {
    (-3.0f64..3.0).prop_map(|e| 10f64.powf(e))
}

fn instance() -> impl Strategy<Value = (LayerProfile, CapacityEstimate, BandwidthMatrix, usize)> {
    (1usize..=8).prop_flat_map(|layers| {
        (1usize..=layers.min(4)).prop_flat_map(move |n| {
            (
                prop::collection::vec(log_uniform(), layers),
                prop::collection::vec(1u64..1_000_000, layers),
                prop::collection::vec(log_uniform(), n),
                prop::collection::vec(log_uniform().prop_map(|b| b * 1e5), n.max(2) - 1),
            )
                .prop_map(move |(t, o, c, b)| {
                    (
                        LayerProfile::new(t, o).unwrap(),
                        CapacityEstimate::new(c).unwrap(),
                        BandwidthMatrix::new(b).unwrap(),
                        n,
                    )
                })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dp_matches_exhaustive_search((profile, caps, bw, n) in instance()) {
        let (points, best) = optimal_partition(&profile, &caps, &bw, n).unwrap();
        let (_, brute) = brute_force_partition(&profile, &caps, &bw, n).unwrap();
        prop_assert_eq!(best, brute);
        prop_assert_eq!(evaluate_partition(&profile, &caps, &bw, &points).unwrap(), best);
    }

    #[test]
    fn every_stage_gets_a_layer((profile, caps, bw, n) in instance()) {
        let (points, _) = optimal_partition(&profile, &caps, &bw, n).unwrap();
        let bounds = points.all_bounds();
        prop_assert_eq!(bounds.len(), n);
        prop_assert_eq!(bounds[0].0, 0);
        prop_assert_eq!(bounds[n - 1].1, profile.len() - 1);
        for w in bounds.windows(2) {
            prop_assert_eq!(w[0].1 + 1, w[1].0);
        }
        for (s, e) in bounds {
            prop_assert!(s <= e);
        }
    }

    /// Slowing one stage never makes the optimum better.
    #[test]
    fn bottleneck_monotone_in_capacity((profile, caps, bw, n) in instance(), which in 0usize..4, factor in 1.0f64..10.0) {
        let (_, before) = optimal_partition(&profile, &caps, &bw, n).unwrap();
        let mut slower = caps.as_slice().to_vec();
        let i = which % n;
        slower[i] *= factor;
        let (_, after) = optimal_partition(&profile, &CapacityEstimate::new(slower).unwrap(), &bw, n).unwrap();
        prop_assert!(after >= before);
    }
}

/// Hand-solved: times [2,3,5], outputs [4,2,1], unit capacities and bandwidth.
/// Splits after layer 0 give max(2, 8, 8) = 8; after layer 1 give max(5, 4, 5) = 5.
#[test]
fn worked_two_stage_instance() {
    let profile = LayerProfile::new(vec![2.0, 3.0, 5.0], vec![4, 2, 1]).unwrap();
    let caps = CapacityEstimate::new(vec![1.0, 1.0]).unwrap();
    let bw = BandwidthMatrix::new(vec![1.0]).unwrap();
    let (points, best) = optimal_partition(&profile, &caps, &bw, 2).unwrap();
    assert_eq!(points.points(), &[1]);
    assert_eq!(best, 5.0);
    let other = PartitionPoints::new(vec![0], 3).unwrap();
    assert_eq!(
        evaluate_partition(&profile, &caps, &bw, &other).unwrap(),
        8.0
    );
}

#[test]
fn slow_stage_sheds_layers() {
    let profile = LayerProfile::new(vec![1.0; 6], vec![1; 6]).unwrap();
    let bw = BandwidthMatrix::uniform(3, 1e9);
    let even = optimal_partition(&profile, &CapacityEstimate::uniform(3), &bw, 3)
        .unwrap()
        .0;
    assert_eq!(even.points(), &[1, 3]);
    let caps = CapacityEstimate::new(vec![1.0, 10.0, 1.0]).unwrap();
    let (points, best) = optimal_partition(&profile, &caps, &bw, 3).unwrap();
    let (s, e) = points.bounds(1);
    assert_eq!(s, e, "the slow stage keeps one layer");
    assert_eq!(best, 10.0);
}

#[test]
fn infeasible_stage_count_rejected() {
    let profile = LayerProfile::new(vec![1.0; 2], vec![1; 2]).unwrap();
    let bw = BandwidthMatrix::uniform(4, 1.0);
    assert!(optimal_partition(&profile, &CapacityEstimate::uniform(3), &bw, 3).is_err());
}
