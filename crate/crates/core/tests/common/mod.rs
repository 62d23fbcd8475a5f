#![allow(dead_code)]

use std::collections::BTreeMap;

use edgepipe::config::ExperimentConfig;
use edgepipe::metrics::{EventKind, MetricsRecord};
use edgepipe::model::LayerParams;
use edgepipe::simulation::Simulation;

pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).expect("test config parses")
}

pub fn bundled(name: &str) -> ExperimentConfig {
    let path = format!("{}/configs/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    ExperimentConfig::load(path).expect("bundled config loads")
}

pub fn nodes(n: usize) -> String {
    "[[nodes]]\n".repeat(n)
}

pub fn count(records: &[MetricsRecord], kind: EventKind) -> usize {
    records.iter().filter(|r| r.event == kind).count()
}

/// Records the central node logged of one kind.
pub fn central(records: &[MetricsRecord], kind: EventKind) -> Vec<&MetricsRecord> {
    records
        .iter()
        .filter(|r| r.event == kind && r.worker == 0)
        .collect()
}

/// Mean loss the last stage logged for forward passes of batches in `lo..hi`,
/// taking the newest record per batch.
pub fn window_loss(records: &[MetricsRecord], lo: i64, hi: i64) -> f64 {
    let mut by_batch = BTreeMap::new();
    for r in records {
        if let (EventKind::F, Some(l)) = (r.event, r.loss) {
            if (lo..hi).contains(&r.batch_id) {
                by_batch.insert(r.batch_id, l);
            }
        }
    }
    assert!(!by_batch.is_empty(), "no losses logged in {lo}..{hi}");
    by_batch.values().sum::<f64>() / by_batch.len() as f64
}

/// Every layer's parameters as the surviving nodes hold them right now: live
/// weights, and separately the newest backup of each layer with its clock.
pub struct Holdings {
    pub live: BTreeMap<usize, LayerParams>,
    pub backups: BTreeMap<usize, (u64, LayerParams)>,
}

pub fn holdings(sim: &Simulation, ids: &[u32]) -> Holdings {
    let mut live = BTreeMap::new();
    let mut backups: BTreeMap<usize, (u64, LayerParams)> = BTreeMap::new();
    for &id in ids {
        if !sim.is_alive(id) {
            continue;
        }
        let node = sim.node(id).expect("node exists");
        if let Some(exec) = node.executor() {
            let w = exec.current();
            for l in w.start()..=w.end() {
                live.insert(l, w.layer(l).cloned().expect("in range"));
            }
        }
        let store = node.replicas();
        for s in store.chain_snapshots().chain(store.global_snapshots()) {
            for l in s.weights.start()..=s.weights.end() {
                let p = s.weights.layer(l).cloned().expect("in range");
                match backups.get(&l) {
                    Some((at, old)) if *at > s.at_batch => {}
                    Some((at, old)) if *at == s.at_batch => {
                        assert_eq!(old, &p, "two backups of layer {l} at clock {at} disagree");
                    }
                    _ => {
                        backups.insert(l, (s.at_batch, p));
                    }
                }
            }
        }
    }
    Holdings { live, backups }
}

pub mod gradients {
    use edgepipe::model::{
        backward_range, forward_range, DenseParams, Layer, LayerStack, WeightSet,
    };
    use edgepipe::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;
    pub const TOLERANCE: f64 = 1e-4;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Probe {
        Dense,
        Relu,
        SoftmaxXent,
    }

    pub const PROBES: [Probe; 3] = [Probe::Dense, Probe::Relu, Probe::SoftmaxXent];

    /// Gradients smaller than this are compared absolutely.
    const FLOOR: f64 = 1e-6;

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        // sum of uniforms is close enough for test inputs
        (0..4).map(|_| rng.random_range(-1.0..1.0)).sum::<f64>() / 2.0
    }

    fn tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| normal(rng))
    }

    struct Case {
        stack: LayerStack,
        weights: WeightSet,
        input: Tensor,
        labels: Option<Vec<usize>>,
        /// Objective is `sum(upstream * output)`.
        upstream: Tensor,
        /// Index of the probed layer; stacks need two layers so it has a neighbour.
        at: usize,
    }

    impl Case {
        fn objective(&self, weights: &WeightSet, input: &Tensor) -> f64 {
            let (y, _) = forward_range(
                &self.stack,
                weights,
                input,
                self.at,
                self.at,
                self.labels.as_deref(),
            )
            .expect("forward");
            y.data()
                .iter()
                .zip(self.upstream.data())
                .map(|(a, b)| a * b)
                .sum()
        }
    }

    fn build(probe: Probe, rng: &mut ChaCha8Rng) -> Case {
        let batch = rng.random_range(1..5);
        let din = rng.random_range(1..7);
        match probe {
            Probe::Dense => {
                let dout = rng.random_range(1..7);
                let w = tensor(vec![din, dout], rng);
                let b = tensor(vec![dout], rng);
                Case {
                    stack: LayerStack::new(vec![Layer::dense(din, dout), Layer::relu(dout)])
                        .expect("stack"),
                    weights: WeightSet::new(0, 0, vec![Some(DenseParams { w, b })])
                        .expect("weights"),
                    input: tensor(vec![batch, din], rng),
                    labels: None,
                    upstream: tensor(vec![batch, dout], rng),
                    at: 0,
                }
            }
            Probe::Relu => {
                // keep inputs away from the kink so the difference quotient is valid
                let input = Tensor::from_fn(vec![batch, din], |_| {
                    let m = 0.05 + rng.random_range(0.0..1.0);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                Case {
                    stack: LayerStack::new(vec![Layer::relu(din), Layer::relu(din)])
                        .expect("stack"),
                    weights: WeightSet::new(0, 0, vec![None]).expect("weights"),
                    input,
                    labels: None,
                    upstream: tensor(vec![batch, din], rng),
                    at: 0,
                }
            }
            Probe::SoftmaxXent => {
                let classes = rng.random_range(2..7);
                let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
                Case {
                    stack: LayerStack::new(vec![
                        Layer::relu(classes),
                        Layer::softmax_xent(classes),
                    ])
                    .expect("stack"),
                    weights: WeightSet::new(0, 1, vec![None]).expect("weights"),
                    input: tensor(vec![batch, classes], rng),
                    labels: Some(labels),
                    upstream: Tensor::scalar(1.0),
                    at: 1,
                }
            }
        }
    }

    /// Largest relative error between analytic and central-difference
    /// gradients, over every input and parameter entry of one random case.
    pub fn check(probe: Probe, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = build(probe, &mut rng);
        let (_, stash) = forward_range(
            &case.stack,
            &case.weights,
            &case.input,
            case.at,
            case.at,
            case.labels.as_deref(),
        )
        .expect("forward");
        let (grads, dx) =
            backward_range(&case.stack, &case.weights, &stash, &case.upstream).expect("backward");
        let mut worst: f64 = 0.0;
        for i in 0..case.input.len() {
            let mut plus = case.input.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = case.input.clone();
            minus.data_mut()[i] -= STEP;
            let numeric = (case.objective(&case.weights, &plus)
                - case.objective(&case.weights, &minus))
                / (2.0 * STEP);
            worst = worst.max(rel_err(dx.data()[i], numeric));
        }
        if let (Some(p), Some(g)) = (&case.weights.params()[0], &grads.grads[0]) {
            for (which, n) in [(0, p.w.len()), (1, p.b.len())] {
                for i in 0..n {
                    let nudge = |delta: f64| {
                        let mut q = p.clone();
                        let t = if which == 0 { &mut q.w } else { &mut q.b };
                        t.data_mut()[i] += delta;
                        let w = WeightSet::new(0, 0, vec![Some(q)]).expect("weights");
                        case.objective(&w, &case.input)
                    };
                    let numeric = (nudge(STEP) - nudge(-STEP)) / (2.0 * STEP);
                    let analytic = if which == 0 {
                        g.w.data()[i]
                    } else {
                        g.b.data()[i]
                    };
                    worst = worst.max(rel_err(analytic, numeric));
                }
            }
        }
        worst
    }
}

/// What a kill did to the weights and the loss.
#[derive(Debug)]
pub struct KillReport {
    pub fault_batch: i64,
    /// Layers whose post-recovery parameters differ from the expected source.
    pub mismatched: Vec<usize>,
    /// Layers no survivor held live and that came from a backup.
    pub restored: Vec<usize>,
    pub backwards_during_recovery: usize,
    pub records: Vec<MetricsRecord>,
}

fn bits(p: &LayerParams) -> Vec<u64> {
    p.iter()
        .flat_map(|d| d.w.data().iter().chain(d.b.data()))
        .map(|v| v.to_bits())
        .collect()
}

/// Runs `cfg` until the central node declares a fault, records what the
/// survivors hold, lets recovery finish, and compares every layer of the new
/// layout with the survivor's live copy or, for lost layers, the newest backup.
/// The run then continues to the end.
pub fn kill_and_compare(cfg: &ExperimentConfig) -> KillReport {
    let mut sim = cfg.simulation().expect("simulation builds");
    let faults = |s: &Simulation| central(s.records(), EventKind::Fault).len();
    assert!(
        sim.run_until(|s| faults(s) > 0).expect("runs to the fault"),
        "no fault detected"
    );
    let fault_at = sim.records().len();
    let fault_batch = sim.records()[fault_at - 1].batch_id;
    let before_gen = sim.central().generation();
    let ids: Vec<u32> = (0..cfg.nodes.len() as u32).collect();
    let held = holdings(&sim, &ids);

    let applied = |s: &Simulation| {
        let gen = s.central().generation();
        gen > before_gen
            && s.central().roster().iter().all(|id| {
                s.records().iter().any(|r| {
                    r.event == EventKind::Recover && r.generation == gen && r.worker == *id
                })
            })
    };
    assert!(
        sim.run_until(applied).expect("recovers"),
        "run ended before recovery applied"
    );
    let backwards_during_recovery = count(&sim.records()[fault_at..], EventKind::B);

    let mut mismatched = Vec::new();
    let mut restored = Vec::new();
    for id in sim.central().roster().to_vec() {
        let w = sim
            .node(id)
            .and_then(|n| n.executor())
            .expect("roster node holds a stage")
            .current();
        for l in w.start()..=w.end() {
            let got = w.layer(l).expect("in range");
            let want = match held.live.get(&l) {
                Some(p) => p,
                None => {
                    restored.push(l);
                    &held.backups.get(&l).expect("a backup exists").1
                }
            };
            if bits(got) != bits(want) {
                mismatched.push(l);
            }
        }
    }
    let out = {
        sim.run().expect("finishes after recovery");
        sim.outcome()
    };
    KillReport {
        fault_batch,
        mismatched,
        restored,
        backwards_during_recovery,
        records: out.records,
    }
}
