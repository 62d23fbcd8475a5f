//! Layered model with hand-written gradients.
//!
//! A [`LayerStack`] describes the architecture only; trainable parameters live in
//! versioned [`WeightSet`]s covering a contiguous layer range, so a stage can hold
//! several published versions at once (weight stashing, vertical sync).
//!
//! Conventions:
//! - activations are `[batch, features]`;
//! - dense layers compute `y = x W + b` with `W: [in, out]`;
//! - the loss layer outputs a `[1]` tensor holding the mean cross-entropy and
//!   expects an upstream gradient of the same shape (normally `[1.0]`).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ModelError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Relu,
    SoftmaxXent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Layer {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
        }
    }

    pub fn relu(dim: usize) -> Self {
        Layer {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
        }
    }

    /// Softmax + cross-entropy over `classes` logits; produces a scalar loss.
    pub fn softmax_xent(classes: usize) -> Self {
        Layer {
            kind: LayerKind::SoftmaxXent,
            in_dim: classes,
            out_dim: 1,
        }
    }

    pub fn has_params(&self) -> bool {
        self.kind == LayerKind::Dense
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self, ModelError> {
        if layers.len() < 2 {
            return Err(ModelError::Invalid(format!(
                "a stack needs at least two layers, got {}",
                layers.len()
            )));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(ModelError::Invalid(format!(
                    "layer {} outputs {} features but layer {} takes {}",
                    j,
                    pair[0].out_dim,
                    j + 1,
                    pair[1].in_dim
                )));
            }
        }
        for (j, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(ModelError::Invalid(format!(
                    "layer {j} has a zero dimension"
                )));
            }
            if l.kind == LayerKind::SoftmaxXent && j + 1 != layers.len() {
                return Err(ModelError::Invalid("the loss layer must be last".into()));
            }
            if l.kind == LayerKind::Relu && l.in_dim != l.out_dim {
                return Err(ModelError::Invalid(format!("relu layer {j} changes width")));
            }
        }
        Ok(LayerStack { layers })
    }

    /// The six-layer classifier: dense, relu, dense, relu, dense, softmax-xent.
    pub fn desk(input: usize, hidden: [usize; 2], classes: usize) -> Result<Self, ModelError> {
        LayerStack::new(vec![
            Layer::dense(input, hidden[0]),
            Layer::relu(hidden[0]),
            Layer::dense(hidden[0], hidden[1]),
            Layer::relu(hidden[1]),
            Layer::dense(hidden[1], classes),
            Layer::softmax_xent(classes),
        ])
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, j: usize) -> &Layer {
        &self.layers[j]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn ends_with_loss(&self) -> bool {
        self.layers.last().map(|l| l.kind) == Some(LayerKind::SoftmaxXent)
    }

    /// He-uniform weights and zero biases from a ChaCha8 stream seeded with `seed`.
    ///
    /// Layers are initialized in order, each drawing `in * out` values row-major.
    pub fn init_weights(&self, seed: u64) -> WeightSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Dense => {
                    let limit = (6.0 / l.in_dim as f64).sqrt();
                    let w = Tensor::from_fn(vec![l.in_dim, l.out_dim], |_| {
                        rng.random_range(-limit..limit)
                    });
                    let b = Tensor::zeros(vec![l.out_dim]);
                    Some(DenseParams { w, b })
                }
                _ => None,
            })
            .collect();
        WeightSet {
            version: 0,
            start: 0,
            params,
        }
    }

    fn check_range(&self, start: usize, end: usize) -> Result<(), ModelError> {
        if start > end || end >= self.layers.len() {
            return Err(ModelError::Dimension(format!(
                "layer range {start}..={end} invalid for {} layers",
                self.layers.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseParams {
    fn zeros_like(&self) -> Self {
        DenseParams {
            w: Tensor::zeros(self.w.shape().to_vec()),
            b: Tensor::zeros(self.b.shape().to_vec()),
        }
    }
}

/// Parameters for one layer: `None` for parameter-free layers.
pub type LayerParams = Option<DenseParams>;

/// Parameters of a contiguous layer range tagged with a version.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    version: u64,
    start: usize,
    params: Vec<LayerParams>,
}

impl WeightSet {
    pub fn new(version: u64, start: usize, params: Vec<LayerParams>) -> Result<Self, ModelError> {
        if params.is_empty() {
            return Err(ModelError::Invalid("empty weight set".into()));
        }
        Ok(WeightSet {
            version,
            start,
            params,
        })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.start + self.params.len() - 1
    }

    pub fn covers(&self, start: usize, end: usize) -> bool {
        self.start <= start && end <= self.end()
    }

    pub fn contains_layer(&self, l: usize) -> bool {
        self.covers(l, l)
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn layer(&self, l: usize) -> Option<&LayerParams> {
        if self.contains_layer(l) {
            Some(&self.params[l - self.start])
        } else {
            None
        }
    }

    /// Copies out layers `start..=end` keeping the version.
    pub fn slice(&self, start: usize, end: usize) -> Result<WeightSet, ModelError> {
        if !self.covers(start, end) || start > end {
            return Err(ModelError::Range {
                have_start: self.start,
                have_end: self.end(),
                want_start: start,
                want_end: end,
            });
        }
        Ok(WeightSet {
            version: self.version,
            start,
            params: self.params[start - self.start..=end - self.start].to_vec(),
        })
    }

    /// Assembles a range from per-layer parameters. Every layer must be present.
    pub fn assemble(
        version: u64,
        start: usize,
        end: usize,
        mut layers: std::collections::BTreeMap<usize, LayerParams>,
    ) -> Result<WeightSet, ModelError> {
        let mut params = Vec::with_capacity(end + 1 - start);
        for l in start..=end {
            let p = layers.remove(&l).ok_or_else(|| {
                ModelError::Invalid(format!("layer {l} missing while assembling"))
            })?;
            params.push(p);
        }
        WeightSet::new(version, start, params)
    }

    pub fn max_abs_diff(&self, other: &WeightSet) -> f64 {
        assert_eq!(self.start, other.start);
        assert_eq!(self.params.len(), other.params.len());
        let mut m: f64 = 0.0;
        for (a, b) in self.params.iter().zip(&other.params) {
            if let (Some(a), Some(b)) = (a, b) {
                m = m.max(a.w.max_abs_diff(&b.w)).max(a.b.max_abs_diff(&b.b));
            }
        }
        m
    }

    /// Equality of parameter values, ignoring the version tag.
    pub fn same_values(&self, other: &WeightSet) -> bool {
        self.start == other.start && self.params == other.params
    }
}

/// Per-layer gradients aligned with a [`WeightSet`]'s range.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub batch_id: i64,
    pub start: usize,
    pub grads: Vec<LayerParams>,
}

impl GradientSet {
    pub fn end(&self) -> usize {
        self.start + self.grads.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.w.data().iter().all(|v| *v == 0.0) && g.b.data().iter().all(|v| *v == 0.0))
    }
}

/// Everything backward needs from a forward pass over a layer range.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    /// Version of the weights the forward pass used.
    pub version: u64,
    pub start: usize,
    pub end: usize,
    /// Input of every layer in the range, in order.
    pub inputs: Vec<Tensor>,
    /// Softmax probabilities when the range ends with the loss layer.
    pub probs: Option<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl ActivationRecord {
    /// Class predictions of the loss layer, if this range contained it.
    pub fn predictions(&self) -> Option<Vec<usize>> {
        let probs = self.probs.as_ref()?;
        let (rows, cols) = probs.dims2().ok()?;
        Some(
            (0..rows)
                .map(|r| argmax(&probs.data()[r * cols..(r + 1) * cols]))
                .collect(),
        )
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn dense_forward(x: &Tensor, p: &DenseParams) -> Result<Tensor, ModelError> {
    let (batch, in_dim) = x.dims2()?;
    let (w_in, out_dim) = p.w.dims2()?;
    if w_in != in_dim || p.b.len() != out_dim {
        return Err(ModelError::Dimension(format!(
            "dense layer {w_in}x{out_dim} given input width {in_dim}"
        )));
    }
    let xd = x.data();
    let wd = p.w.data();
    let bd = p.b.data();
    let mut y = vec![0.0; batch * out_dim];
    for r in 0..batch {
        for o in 0..out_dim {
            let mut acc = 0.0;
            for i in 0..in_dim {
                acc += xd[r * in_dim + i] * wd[i * out_dim + o];
            }
            y[r * out_dim + o] = acc + bd[o];
        }
    }
    Ok(Tensor::from_parts(vec![batch, out_dim], y))
}

fn dense_backward(x: &Tensor, p: &DenseParams, g: &Tensor) -> (DenseParams, Tensor) {
    let (batch, in_dim) = x.dims2().expect("checked at forward");
    let out_dim = p.b.len();
    let xd = x.data();
    let wd = p.w.data();
    let gd = g.data();
    let mut dw = vec![0.0; in_dim * out_dim];
    let mut db = vec![0.0; out_dim];
    let mut dx = vec![0.0; batch * in_dim];
    for r in 0..batch {
        for o in 0..out_dim {
            let go = gd[r * out_dim + o];
            db[o] += go;
            for i in 0..in_dim {
                dw[i * out_dim + o] += xd[r * in_dim + i] * go;
            }
        }
        for i in 0..in_dim {
            let mut acc = 0.0;
            for o in 0..out_dim {
                acc += gd[r * out_dim + o] * wd[i * out_dim + o];
            }
            dx[r * in_dim + i] = acc;
        }
    }
    (
        DenseParams {
            w: Tensor::from_parts(vec![in_dim, out_dim], dw),
            b: Tensor::from_parts(vec![out_dim], db),
        },
        Tensor::from_parts(vec![batch, in_dim], dx),
    )
}

fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|v| if *v > 0.0 { *v } else { 0.0 })
            .collect(),
    )
}

fn relu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(g.data())
            .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
            .collect(),
    )
}

/// Row-wise softmax (max-shifted) and mean cross-entropy.
fn softmax_xent_forward(x: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor), ModelError> {
    let (batch, classes) = x.dims2()?;
    if labels.len() != batch {
        return Err(ModelError::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= classes) {
        return Err(ModelError::Dimension(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let xd = x.data();
    let mut probs = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for r in 0..batch {
        let row = &xd[r * classes..(r + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..classes {
            let e = (row[c] - m).exp();
            probs[r * classes + c] = e;
            sum += e;
        }
        for c in 0..classes {
            probs[r * classes + c] /= sum;
        }
        // -log softmax computed from the shifted logits for stability
        loss += sum.ln() - (row[labels[r]] - m);
    }
    loss /= batch as f64;
    Ok((
        Tensor::from_parts(vec![1], vec![loss]),
        Tensor::from_parts(vec![batch, classes], probs),
    ))
}

fn softmax_xent_backward(probs: &Tensor, labels: &[usize], g: &Tensor) -> Tensor {
    let (batch, classes) = probs.dims2().expect("probs are 2-D");
    let scale = g.data()[0] / batch as f64;
    let mut dx = probs.data().to_vec();
    for r in 0..batch {
        dx[r * classes + labels[r]] -= 1.0;
    }
    for v in &mut dx {
        *v *= scale;
    }
    Tensor::from_parts(vec![batch, classes], dx)
}

/// Runs layers `start..=end` on `input`.
///
/// `labels` is required when the range includes the loss layer.
pub fn forward_range(
    stack: &LayerStack,
    weights: &WeightSet,
    input: &Tensor,
    start: usize,
    end: usize,
    labels: Option<&[usize]>,
) -> Result<(Tensor, ActivationRecord), ModelError> {
    stack.check_range(start, end)?;
    if !weights.covers(start, end) {
        return Err(ModelError::Range {
            have_start: weights.start(),
            have_end: weights.end(),
            want_start: start,
            want_end: end,
        });
    }
    let first = stack.layer(start);
    let (_, width) = input.dims2()?;
    if width != first.in_dim {
        return Err(ModelError::Dimension(format!(
            "layer {start} expects {} features, input has {width}",
            first.in_dim
        )));
    }
    let mut inputs = Vec::with_capacity(end + 1 - start);
    let mut probs = None;
    let mut labels_kept = None;
    let mut x = input.clone();
    for j in start..=end {
        let layer = stack.layer(j);
        let y = match layer.kind {
            LayerKind::Dense => {
                let p = weights.layer(j).and_then(|p| p.as_ref()).ok_or_else(|| {
                    ModelError::Invalid(format!("dense layer {j} has no parameters"))
                })?;
                dense_forward(&x, p)?
            }
            LayerKind::Relu => relu_forward(&x),
            LayerKind::SoftmaxXent => {
                let labels = labels.ok_or(ModelError::MissingLabels)?;
                let (loss, p) = softmax_xent_forward(&x, labels)?;
                probs = Some(p);
                labels_kept = Some(labels.to_vec());
                loss
            }
        };
        inputs.push(std::mem::replace(&mut x, y));
    }
    Ok((
        x,
        ActivationRecord {
            version: weights.version(),
            start,
            end,
            inputs,
            probs,
            labels: labels_kept,
        },
    ))
}

/// Backpropagates `upstream` through the range recorded in `stash`.
///
/// `weights` must be the version the forward pass used.
pub fn backward_range(
    stack: &LayerStack,
    weights: &WeightSet,
    stash: &ActivationRecord,
    upstream: &Tensor,
) -> Result<(GradientSet, Tensor), ModelError> {
    if stash.version != weights.version() {
        return Err(ModelError::StashingViolation {
            stashed: stash.version,
            given: weights.version(),
        });
    }
    if !weights.covers(stash.start, stash.end) {
        return Err(ModelError::Range {
            have_start: weights.start(),
            have_end: weights.end(),
            want_start: stash.start,
            want_end: stash.end,
        });
    }
    let last = stack.layer(stash.end);
    let expected_shape: Vec<usize> = if last.kind == LayerKind::SoftmaxXent {
        vec![1]
    } else {
        vec![
            stash.inputs[stash.inputs.len() - 1].shape()[0],
            last.out_dim,
        ]
    };
    if upstream.shape() != expected_shape.as_slice() {
        return Err(ModelError::Dimension(format!(
            "upstream gradient shape {:?}, expected {:?}",
            upstream.shape(),
            expected_shape
        )));
    }
    let mut grads: Vec<LayerParams> = vec![None; stash.end + 1 - stash.start];
    let mut g = upstream.clone();
    for j in (stash.start..=stash.end).rev() {
        let x = &stash.inputs[j - stash.start];
        let layer = stack.layer(j);
        g = match layer.kind {
            LayerKind::Dense => {
                let p = weights.layer(j).and_then(|p| p.as_ref()).ok_or_else(|| {
                    ModelError::Invalid(format!("dense layer {j} has no parameters"))
                })?;
                let (dp, dx) = dense_backward(x, p, &g);
                grads[j - stash.start] = Some(dp);
                dx
            }
            LayerKind::Relu => relu_backward(x, &g),
            LayerKind::SoftmaxXent => {
                let probs = stash.probs.as_ref().ok_or(ModelError::MissingLabels)?;
                let labels = stash.labels.as_ref().ok_or(ModelError::MissingLabels)?;
                softmax_xent_backward(probs, labels, &g)
            }
        };
    }
    Ok((
        GradientSet {
            batch_id: -1,
            start: stash.start,
            grads,
        },
        g,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
        }
    }
}

/// Momentum buffers for one stage's layer range.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    start: usize,
    velocity: Vec<LayerParams>,
}

impl SgdState {
    pub fn zeros_for(weights: &WeightSet) -> Self {
        SgdState {
            start: weights.start(),
            velocity: weights
                .params()
                .iter()
                .map(|p| p.as_ref().map(DenseParams::zeros_like))
                .collect(),
        }
    }

    /// Keeps the buffers of layers still in `start..=end`, zeroing new ones.
    pub fn rebased(&self, weights: &WeightSet) -> Self {
        let mut next = SgdState::zeros_for(weights);
        for l in weights.start()..=weights.end() {
            if l >= self.start && l < self.start + self.velocity.len() {
                if let (Some(dst), Some(src)) = (
                    next.velocity[l - weights.start()].as_mut(),
                    self.velocity[l - self.start].as_ref(),
                ) {
                    if dst.w.shape() == src.w.shape() {
                        *dst = src.clone();
                    }
                }
            }
        }
        next
    }
}

/// SGD with momentum and L2 weight decay:
/// `g' = g + wd*w`, `v = mu*v + g'`, `w = w - lr*v`. The version goes up by one.
pub fn sgd_step(
    weights: &WeightSet,
    grads: &GradientSet,
    state: &mut SgdState,
    cfg: &SgdConfig,
) -> Result<WeightSet, ModelError> {
    if grads.start != weights.start()
        || grads.grads.len() != weights.params().len()
        || state.start != weights.start()
        || state.velocity.len() != weights.params().len()
    {
        return Err(ModelError::Dimension(format!(
            "gradient range {}..={} does not match weights {}..={}",
            grads.start,
            grads.end(),
            weights.start(),
            weights.end()
        )));
    }
    let mut params = weights.params().to_vec();
    for ((p, g), v) in params
        .iter_mut()
        .zip(&grads.grads)
        .zip(state.velocity.iter_mut())
    {
        match (p, g, v) {
            (Some(p), Some(g), Some(v)) => {
                update_tensor(&mut p.w, &g.w, &mut v.w, cfg)?;
                update_tensor(&mut p.b, &g.b, &mut v.b, cfg)?;
            }
            (None, None, None) => {}
            _ => {
                return Err(ModelError::Dimension(
                    "parameter layout differs between weights and gradients".into(),
                ))
            }
        }
    }
    Ok(WeightSet {
        version: weights.version() + 1,
        start: weights.start(),
        params,
    })
}

fn update_tensor(
    w: &mut Tensor,
    g: &Tensor,
    v: &mut Tensor,
    cfg: &SgdConfig,
) -> Result<(), ModelError> {
    if w.shape() != g.shape() || w.shape() != v.shape() {
        return Err(ModelError::Dimension(format!(
            "parameter {:?} vs gradient {:?}",
            w.shape(),
            g.shape()
        )));
    }
    for ((wv, gv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let d = gv + cfg.weight_decay * *wv;
        *vv = cfg.momentum * *vv + d;
        *wv -= cfg.lr * *vv;
    }
    Ok(())
}

/// Element-wise mean of weight sets over the same range, summed in input order.
/// The result's version is one past the newest input.
pub fn aggregate_weights(sets: &[Arc<WeightSet>]) -> Result<WeightSet, ModelError> {
    if sets.len() < 2 {
        return Err(ModelError::Invalid(format!(
            "aggregation needs at least two weight sets, got {}",
            sets.len()
        )));
    }
    let first = &sets[0];
    for s in &sets[1..] {
        if s.start() != first.start() || s.end() != first.end() {
            return Err(ModelError::Range {
                have_start: s.start(),
                have_end: s.end(),
                want_start: first.start(),
                want_end: first.end(),
            });
        }
    }
    let k = sets.len() as f64;
    let mut params = first.params().to_vec();
    for (idx, p) in params.iter_mut().enumerate() {
        if let Some(p) = p {
            for s in &sets[1..] {
                let q = s.params()[idx].as_ref().ok_or_else(|| {
                    ModelError::Dimension("parameter layout differs between weight sets".into())
                })?;
                if q.w.shape() != p.w.shape() || q.b.shape() != p.b.shape() {
                    return Err(ModelError::Dimension("parameter shapes differ".into()));
                }
                for (a, b) in p.w.data_mut().iter_mut().zip(q.w.data()) {
                    *a += b;
                }
                for (a, b) in p.b.data_mut().iter_mut().zip(q.b.data()) {
                    *a += b;
                }
            }
            for a in p.w.data_mut() {
                *a /= k;
            }
            for a in p.b.data_mut() {
                *a /= k;
            }
        }
    }
    let version = sets.iter().map(|s| s.version()).max().unwrap() + 1;
    Ok(WeightSet {
        version,
        start: first.start(),
        params,
    })
}

/// Class predictions of the full model, skipping the loss layer.
pub fn predict(
    stack: &LayerStack,
    weights: &WeightSet,
    input: &Tensor,
) -> Result<Vec<usize>, ModelError> {
    let end = if stack.ends_with_loss() {
        stack.len() - 2
    } else {
        stack.len() - 1
    };
    let (logits, _) = forward_range(stack, weights, input, 0, end, None)?;
    let (rows, cols) = logits.dims2()?;
    Ok((0..rows)
        .map(|r| argmax(&logits.data()[r * cols..(r + 1) * cols]))
        .collect())
}
