mod common;

use common::{bundled, config, nodes};

#[test]
fn same_config_same_records() {
    let cfg = bundled("fault-multi");
    let a = cfg.simulation().unwrap().run().unwrap();
    let b = cfg.simulation().unwrap().run().unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.end_time.to_bits(), b.end_time.to_bits());
}

#[test]
fn seed_changes_weights_and_data() {
    let text = |seed| format!("seed = {seed}\nbatches = 30\n{}", nodes(2));
    let a = config(&text(1)).simulation().unwrap().run().unwrap();
    let b = config(&text(2)).simulation().unwrap().run().unwrap();
    let losses = |o: &edgepipe::simulation::SimOutcome| {
        o.records.iter().filter_map(|r| r.loss).collect::<Vec<_>>()
    };
    assert_ne!(losses(&a), losses(&b));
}

#[test]
fn run_id_follows_config() {
    let a = config("seed = 3\n");
    let mut b = a.clone();
    b.out = Some("elsewhere.jsonl".into());
    assert_eq!(a.run_id(), b.run_id());
    b.seed = 4;
    assert_ne!(a.hash(), b.hash());
    assert!(b.run_id().ends_with("-s4-sim"));
}
