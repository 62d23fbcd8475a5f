mod common;

use std::sync::Arc;

use common::{config, nodes};
use edgepipe::model::{aggregate_weights, LayerStack, WeightSet};
use edgepipe::replication::{
    assemble_checkpoint, decode_checkpoint, encode_checkpoint, ReplicaStore, Snapshot, SnapshotKind,
};
use proptest::prelude::*;

fn stack() -> LayerStack {
    LayerStack::desk(4, [5, 3], 2).unwrap()
}

fn snapshot(
    seed: u64,
    stage: usize,
    range: (usize, usize),
    at: u64,
    kind: SnapshotKind,
) -> Snapshot {
    let w = stack()
        .init_weights(seed)
        .slice(range.0, range.1)
        .unwrap()
        .with_version(at);
    Snapshot {
        origin_stage: stage,
        at_batch: at,
        kind,
        weights: Arc::new(w),
    }
}

#[test]
fn checkpoint_round_trip_and_assembly() {
    let round = vec![
        snapshot(1, 0, (0, 1), 200, SnapshotKind::Global),
        snapshot(1, 1, (2, 3), 200, SnapshotKind::Global),
        snapshot(1, 2, (4, 5), 200, SnapshotKind::Global),
    ];
    let bytes = encode_checkpoint(&round);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), round);
    let (at, w) = assemble_checkpoint(&round).unwrap();
    assert_eq!(at, 200);
    assert!(w.same_values(&stack().init_weights(1)));
}

#[test]
fn damaged_checkpoints_rejected() {
    let bytes = encode_checkpoint(&[snapshot(1, 0, (0, 5), 100, SnapshotKind::Global)]);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(decode_checkpoint(&wrong).is_err());
    let gap = [
        snapshot(1, 0, (0, 1), 100, SnapshotKind::Global),
        snapshot(1, 2, (4, 5), 100, SnapshotKind::Global),
    ];
    assert!(assemble_checkpoint(&gap).is_err());
}

#[test]
fn newest_copy_of_a_layer_wins() {
    let mut store = ReplicaStore::new();
    store.seed(Arc::new(stack().init_weights(9)));
    store.store(snapshot(1, 1, (2, 3), 50, SnapshotKind::Chain));
    store.store(snapshot(2, 1, (2, 3), 100, SnapshotKind::Global));
    assert_eq!(store.lookup_layer(2).unwrap().at_batch, 100);
    // layers with no backup fall back to the initial model
    assert_eq!(store.lookup_layer(0).unwrap().at_batch, 0);
    store.store(snapshot(3, 1, (2, 3), 150, SnapshotKind::Chain));
    let s = store.lookup_layer(3).unwrap();
    assert_eq!((s.at_batch, s.kind), (150, SnapshotKind::Chain));
}

#[test]
fn complete_round_needs_every_layer() {
    let mut store = ReplicaStore::new();
    store.store(snapshot(1, 0, (0, 1), 100, SnapshotKind::Global));
    store.store(snapshot(1, 1, (2, 3), 100, SnapshotKind::Global));
    assert!(store.complete_round(100, 6).is_none());
    store.store(snapshot(1, 2, (4, 5), 100, SnapshotKind::Global));
    assert_eq!(store.complete_round(100, 6).unwrap().len(), 3);
}

/// With checkpoints on, every complete global round is written and reassembles
/// into the full model.
#[test]
fn run_writes_checkpoints_each_round() {
    let cfg = config(&format!(
        "batches = 250\n[replication]\ncheckpoint = true\n[sim]\nflops = 2e7\n{}",
        nodes(3)
    ));
    let out = cfg.simulation().unwrap().run().unwrap();
    let rounds: Vec<u64> = out.checkpoints.iter().map(|(at, _)| *at).collect();
    assert_eq!(rounds, vec![100, 200]);
    for (at, bytes) in &out.checkpoints {
        let (got, w) = assemble_checkpoint(&decode_checkpoint(bytes).unwrap()).unwrap();
        assert_eq!(got, *at);
        assert_eq!((w.start(), w.end()), (0, 5));
    }
}

fn sets(values: &[Vec<f64>]) -> Vec<Arc<WeightSet>> {
    values
        .iter()
        .enumerate()
        .map(|(v, xs)| {
            let mut w = stack().init_weights(0).with_version(v as u64);
            let mut it = xs.iter().cycle();
            let mut params = w.params().to_vec();
            for p in params.iter_mut().flatten() {
                for x in p.w.data_mut().iter_mut().chain(p.b.data_mut()) {
                    *x = *it.next().unwrap();
                }
            }
            w = WeightSet::new(v as u64, 0, params).unwrap();
            Arc::new(w)
        })
        .collect()
}

proptest! {
    #[test]
    fn aggregate_is_bounded_mean(values in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 1..8), 2..5)) {
        let inputs = sets(&values);
        let agg = aggregate_weights(&inputs).unwrap();
        prop_assert_eq!(agg.version(), inputs.len() as u64);
        for (j, p) in agg.params().iter().enumerate() {
            let Some(p) = p else { continue };
            for (i, v) in p.w.data().iter().enumerate() {
                let col: Vec<f64> = inputs.iter().map(|s| s.params()[j].as_ref().unwrap().w.data()[i]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn aggregating_copies_is_identity(x in -5.0f64..5.0, k in 2usize..5) {
        let inputs = sets(&vec![vec![x]; k]);
        // summing then dividing may round, by a few ulps at most
        let diff = aggregate_weights(&inputs).unwrap().max_abs_diff(&inputs[0]);
        prop_assert!(diff <= 4.0 * f64::EPSILON * x.abs(), "diff {}", diff);
    }
}
