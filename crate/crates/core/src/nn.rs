//! Small fully-connected embedding networks.
//!
//! A network is a stack of ReLU hidden layers, a linear embedding
//! projection, and an optional linear classification head on top of the
//! embedding. The last hidden activation is exposed so a routed child node
//! can continue from it.
//!
//! Weights are `f32`. Losses are evaluated in `f64`.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub embedding_dim: usize,
    /// 0 means no classification head.
    pub num_classes: usize,
    /// Densely connected body: every hidden layer sees the concatenation of
    /// the input and all earlier hidden outputs, and the hidden activation
    /// is that full concatenation.
    #[serde(default)]
    pub dense: bool,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, embedding_dim: usize, num_classes: usize) -> Self {
        NetworkSpec {
            input_dim,
            hidden_layers,
            embedding_dim,
            num_classes,
            dense: false,
        }
    }

    pub fn densely_connected(mut self) -> Self {
        self.dense = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_layers.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.num_classes == 1 {
            return Err(Error::Config("a classification head needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every body layer, embedding projection last.
    pub fn body_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut state = self.input_dim;
        for &w in &self.hidden_layers {
            shapes.push((state, w));
            state = if self.dense { state + w } else { w };
        }
        shapes.push((state, self.embedding_dim));
        shapes
    }

    pub fn head_shape(&self) -> Option<(usize, usize)> {
        (self.num_classes > 0).then_some((self.embedding_dim, self.num_classes))
    }

    /// Length of the hidden activation handed to a child.
    pub fn hidden_dim(&self) -> usize {
        if self.dense {
            self.input_dim + self.hidden_layers.iter().sum::<usize>()
        } else {
            *self.hidden_layers.last().expect("validated spec has hidden layers")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub flops: u64,
    pub param_bytes: u64,
}

/// Forward cost (one multiply-add = 2 FLOPs) and `f32` weight footprint.
pub fn cost_of(spec: &NetworkSpec) -> CostModel {
    let shapes = spec.body_shapes().into_iter().chain(spec.head_shape());
    let (mut macs, mut params) = (0u64, 0u64);
    for (fan_in, fan_out) in shapes {
        macs += (fan_in * fan_out) as u64;
        params += (fan_in * fan_out + fan_out) as u64;
    }
    CostModel {
        flops: 2 * macs,
        param_bytes: 4 * params,
    }
}

/// Fully-connected layer; `weights` is `(fan_out, fan_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        Dense {
            weights: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.random_range(-limit..=limit)
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    /// Single-vector product with a fixed summation order, so the result
    /// for a given input never depends on how many inputs are processed
    /// together.
    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        self.weights
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(row, b)| {
                let mut acc = 0.0f32;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                acc + b
            })
            .collect()
    }

    fn apply_batch(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.weights.t()) + &self.bias
    }

    fn step(&mut self, grad_w: &Array2<f32>, grad_b: &Array1<f32>, lr: f32) {
        self.weights.scaled_add(-lr, grad_w);
        self.bias.scaled_add(-lr, grad_b);
    }
}

fn relu_in_place(v: &mut [f32]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub embedding: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    /// Last hidden activation, the input of a routed child.
    pub hidden: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    /// Hidden layers followed by the embedding projection.
    pub layers: Vec<Dense>,
    pub head: Option<Dense>,
    pub body_frozen: bool,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng_for(seed, "init");
        let layers = spec
            .body_shapes()
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, &mut rng))
            .collect();
        let head = spec.head_shape().map(|(i, o)| Dense::glorot(i, o, &mut rng));
        Ok(Network {
            spec,
            layers,
            head,
            body_frozen: false,
        })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .body_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        let head = spec.head_shape().map(|(i, o)| Dense::zeros(i, o));
        Ok(Network {
            spec,
            layers,
            head,
            body_frozen: false,
        })
    }

    pub fn cost(&self) -> CostModel {
        cost_of(&self.spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.body_shapes();
        let shape_ok = |d: &Dense, (i, o): (usize, usize)| {
            d.fan_in() == i && d.fan_out() == o && d.bias.len() == o
        };
        if self.layers.len() != shapes.len()
            || !self.layers.iter().zip(&shapes).all(|(d, s)| shape_ok(d, *s))
        {
            return Err(Error::Invalid("layer shapes disagree with the network spec".into()));
        }
        match (&self.head, self.spec.head_shape()) {
            (None, None) => Ok(()),
            (Some(h), Some(s)) if shape_ok(h, s) => Ok(()),
            _ => Err(Error::Invalid("head shape disagrees with the network spec".into())),
        }
    }

    pub fn forward(&self, input: &[f32]) -> Result<Forward> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Dimension {
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        let (hidden_layers, projection) = self.layers.split_at(self.layers.len() - 1);
        let mut hidden = input.to_vec();
        for layer in hidden_layers {
            let mut h = layer.apply(&hidden);
            relu_in_place(&mut h);
            if self.spec.dense {
                hidden.extend(h);
            } else {
                hidden = h;
            }
        }
        let embedding = projection[0].apply(&hidden);
        let logits = self.head.as_ref().map(|h| h.apply(&embedding));
        Ok(Forward {
            embedding,
            logits,
            hidden,
        })
    }

    /// Embeddings for a batch of inputs, one row per input.
    pub fn embed_batch(&self, inputs: ArrayView2<f32>) -> Array2<f32> {
        self.forward_cached(inputs).pop().expect("network has layers")
    }

    /// Last hidden activation for a batch of inputs, one row per input.
    pub fn hidden_batch(&self, inputs: ArrayView2<f32>) -> Array2<f32> {
        let mut acts = self.forward_cached(inputs);
        let at = acts.len() - 2;
        acts.swap_remove(at)
    }

    /// Input of every body layer (the raw input first), then the embedding.
    fn forward_cached(&self, inputs: ArrayView2<f32>) -> Vec<Array2<f32>> {
        let mut acts = vec![inputs.to_owned()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply_batch(acts[l].view());
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
                if self.spec.dense {
                    z = ndarray::concatenate(Axis(1), &[acts[l].view(), z.view()]).expect("same row count");
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Backpropagates `grad_embedding` through the body and takes one SGD step.
    fn body_step(&mut self, acts: &[Array2<f32>], grad_embedding: Array2<f32>, lr: f32) {
        let last = self.layers.len() - 1;
        let mut grad = grad_embedding;
        for l in (0..=last).rev() {
            // `grad` is w.r.t. this layer's output; for hidden layers that is
            // the post-ReLU part of the next state.
            if l < last {
                let state = &acts[l + 1];
                let width = self.layers[l].fan_out();
                let own = state.ncols() - width;
                let mut g_out = grad.slice(ndarray::s![.., own..]).to_owned();
                ndarray::Zip::from(&mut g_out)
                    .and(state.slice(ndarray::s![.., own..]))
                    .for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                let carried = (own > 0).then(|| grad.slice(ndarray::s![.., ..own]).to_owned());
                grad = g_out;
                let grad_w = grad.t().dot(&acts[l]);
                let grad_b = grad.sum_axis(Axis(0));
                if l > 0 {
                    let mut upstream = grad.dot(&self.layers[l].weights);
                    if let Some(c) = carried {
                        upstream += &c;
                    }
                    self.layers[l].step(&grad_w, &grad_b, lr);
                    grad = upstream;
                } else {
                    self.layers[l].step(&grad_w, &grad_b, lr);
                }
            } else {
                let grad_w = grad.t().dot(&acts[l]);
                let grad_b = grad.sum_axis(Axis(0));
                let upstream = grad.dot(&self.layers[l].weights);
                self.layers[l].step(&grad_w, &grad_b, lr);
                grad = upstream;
            }
        }
    }

    /// Hash of every body parameter's bit pattern.
    pub fn body_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            hash_dense(&mut h, layer);
        }
        h.finish()
    }

    /// Hash of every parameter's bit pattern, head included.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        h.write_u64(self.body_fingerprint());
        if let Some(head) = &self.head {
            hash_dense(&mut h, head);
        }
        h.finish()
    }
}

fn hash_dense(h: &mut DefaultHasher, d: &Dense) {
    for w in d.weights.iter().chain(d.bias.iter()) {
        h.write_u32(w.to_bits());
    }
}

pub fn rows_to_array(rows: &[Vec<f32>], dim: usize) -> Array2<f32> {
    let mut a = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in a.outer_iter_mut().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(&src[..]));
    }
    a
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    /// d loss / d embedding, one row per embedding.
    pub grad: Vec<Vec<f64>>,
    /// Anchors that have at least one positive and one negative.
    pub valid: Vec<bool>,
    /// Valid anchors whose hinge is strictly positive.
    pub active: Vec<bool>,
    pub hardest_positive: Vec<Option<usize>>,
    pub hardest_negative: Vec<Option<usize>>,
}

/// Batch-hard triplet loss: for each anchor, the farthest same-label sample
/// and the nearest other-label sample, hinged at `margin`, averaged over
/// anchors that have both. Ties resolve to the lowest index.
pub fn triplet_loss_batch_hard(embeddings: &[Vec<f64>], labels: &[u32], margin: f64) -> Result<TripletLoss> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::Invalid(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if labels.iter().all(|&l| Some(&l) == labels.first()) {
        return Err(Error::DegenerateBatch("batch holds a single identity".into()));
    }
    let dim = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: bad.len(),
        });
    }

    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut hardest_positive = vec![None; n];
    let mut hardest_negative = vec![None; n];
    for a in 0..n {
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[a * n + j];
            if labels[j] == labels[a] {
                if hardest_positive[a].is_none_or(|p: usize| d > dist[a * n + p]) {
                    hardest_positive[a] = Some(j);
                }
            } else if hardest_negative[a].is_none_or(|q: usize| d < dist[a * n + q]) {
                hardest_negative[a] = Some(j);
            }
        }
    }
    let valid: Vec<bool> = (0..n)
        .map(|a| hardest_positive[a].is_some() && hardest_negative[a].is_some())
        .collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::DegenerateBatch("no anchor has a positive sample".into()));
    }

    let scale = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut active = vec![false; n];
    let mut grad = vec![vec![0.0f64; dim]; n];
    for a in (0..n).filter(|&a| valid[a]) {
        let (p, q) = (hardest_positive[a].unwrap(), hardest_negative[a].unwrap());
        let (d_ap, d_an) = (dist[a * n + p], dist[a * n + q]);
        let hinge = margin + d_ap - d_an;
        if hinge <= 0.0 {
            continue;
        }
        active[a] = true;
        loss += hinge * scale;
        for k in 0..dim {
            // Subgradient 0 where a distance vanishes.
            let g_ap = if d_ap > 0.0 {
                (embeddings[a][k] - embeddings[p][k]) / d_ap * scale
            } else {
                0.0
            };
            let g_an = if d_an > 0.0 {
                (embeddings[a][k] - embeddings[q][k]) / d_an * scale
            } else {
                0.0
            };
            grad[a][k] += g_ap - g_an;
            grad[p][k] -= g_ap;
            grad[q][k] += g_an;
        }
    }
    Ok(TripletLoss {
        loss,
        grad,
        valid,
        active,
        hardest_positive,
        hardest_negative,
    })
}

/// Mean softmax cross-entropy over rows, with its gradient w.r.t. logits.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Invalid("cross_entropy needs one label per non-empty row".into()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Invalid(format!("label {y} out of range for {} classes", row.len())));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += (z.ln() + max - row[y]) / n;
        grad.push(
            exps.iter()
                .enumerate()
                .map(|(c, e)| (e / z - if c == y { 1.0 } else { 0.0 }) / n)
                .collect(),
        );
    }
    Ok((loss, grad))
}

fn to_f64_rows(a: &Array2<f32>) -> Vec<Vec<f64>> {
    a.outer_iter()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn from_f64_rows(rows: &[Vec<f64>]) -> Array2<f32> {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j] as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub max_epochs: usize,
    pub saturation_patience: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            p: 8,
            k: 4,
            margin: 1.0,
            learning_rate: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 100,
            max_epochs: 150,
            saturation_patience: 20,
            seed: 0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.p < 2 || self.k < 2 {
            return bad("batch-hard mining needs P >= 2 and K >= 2");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay_factor >= 1.0) || self.lr_decay_every == 0 {
            return bad("lr_decay_factor must be >= 1 and lr_decay_every positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub saturated: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// P identities by K images, sampled with replacement only where an
/// identity (or the identity pool) is too small.
fn sample_batch(groups: &[Vec<usize>], p: usize, k: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..groups.len()).collect();
    ids.shuffle(rng);
    ids.truncate(p.min(groups.len()));
    let mut batch = Vec::with_capacity(ids.len() * k);
    for id in ids {
        let members = &groups[id];
        if members.len() >= k {
            batch.extend(members.choose_multiple(rng, k));
        } else {
            batch.extend((0..k).map(|_| *members.choose(rng).expect("non-empty group")));
        }
    }
    batch
}

fn group_by_label(labels: &[u32]) -> Vec<Vec<usize>> {
    let mut order: Vec<u32> = labels.to_vec();
    order.sort_unstable();
    order.dedup();
    let mut groups = vec![Vec::new(); order.len()];
    for (i, l) in labels.iter().enumerate() {
        let g = order.binary_search(l).expect("label present");
        groups[g].push(i);
    }
    groups
}

/// Trains the body with batch-hard triplet loss and plain SGD under a step
/// decay schedule. Stops after `max_epochs`, or once the epoch loss has not
/// improved by 1e-4 for `saturation_patience` epochs.
pub fn train_embedding(
    network: &mut Network,
    inputs: ArrayView2<f32>,
    identities: &[u32],
    config: &TripletConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if network.body_frozen {
        return Err(Error::Invalid("network body is frozen".into()));
    }
    if inputs.ncols() != network.spec.input_dim {
        return Err(Error::Dimension {
            expected: network.spec.input_dim,
            got: inputs.ncols(),
        });
    }
    if inputs.nrows() != identities.len() {
        return Err(Error::Invalid("one identity label per input row required".into()));
    }
    let groups = group_by_label(identities);
    if groups.len() < 2 {
        return Err(Error::Invalid(format!(
            "fewer than 2 identities ({}) in training data",
            groups.len()
        )));
    }

    let mut rng = seed::rng_for(config.seed, "triplet");
    let per_batch = config.p * config.k;
    let batches_per_epoch = inputs.nrows().div_ceil(per_batch).max(1);
    let mut report = TrainReport {
        epochs_run: 0,
        epoch_losses: Vec::new(),
        saturated: false,
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let lr = config.learning_rate_at(epoch) as f32;
        let mut total = 0.0;
        for _ in 0..batches_per_epoch {
            let batch = sample_batch(&groups, config.p, config.k, &mut rng);
            let x = inputs.select(Axis(0), &batch);
            let labels: Vec<u32> = batch.iter().map(|&i| identities[i]).collect();
            let acts = network.forward_cached(x.view());
            let emb = to_f64_rows(acts.last().unwrap());
            let out = triplet_loss_batch_hard(&emb, &labels, config.margin)?;
            total += out.loss;
            network.body_step(&acts, from_f64_rows(&out.grad), lr);
        }
        let loss = total / batches_per_epoch as f64;
        report.epoch_losses.push(loss);
        report.epochs_run = epoch + 1;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("triplet loss diverged at epoch {epoch}")));
        }
        if best - loss > 1e-4 {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.saturation_patience {
                report.saturated = true;
                break;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("head epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("head learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam state for one dense layer.
struct Adam {
    lr: f64,
    t: i32,
    m_w: Array2<f32>,
    v_w: Array2<f32>,
    m_b: Array1<f32>,
    v_b: Array1<f32>,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(layer: &Dense, lr: f64) -> Self {
        Adam {
            lr,
            t: 0,
            m_w: Array2::zeros(layer.weights.raw_dim()),
            v_w: Array2::zeros(layer.weights.raw_dim()),
            m_b: Array1::zeros(layer.bias.raw_dim()),
            v_b: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    fn step(&mut self, layer: &mut Dense, grad_w: &Array2<f32>, grad_b: &Array1<f32>) {
        self.t += 1;
        let c1 = 1.0 - f64::from(Self::BETA1).powi(self.t);
        let c2 = 1.0 - f64::from(Self::BETA2).powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let update = |p: &mut f32, m: &mut f32, v: &mut f32, g: f32| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= step * *m / (v.sqrt() + Self::EPS);
        };
        ndarray::Zip::from(&mut layer.weights)
            .and(&mut self.m_w)
            .and(&mut self.v_w)
            .and(grad_w)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut layer.bias)
            .and(&mut self.m_b)
            .and(&mut self.v_b)
            .and(grad_b)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
}

/// Minibatch Adam on softmax cross-entropy for a single linear layer.
/// Returns the mean loss of the final epoch.
pub fn fit_softmax(
    layer: &mut Dense,
    inputs: ArrayView2<f32>,
    labels: &[usize],
    config: &HeadConfig,
    rng: &mut seed::Rng,
) -> Result<f64> {
    config.validate()?;
    if inputs.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Invalid("one label per non-empty input row required".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= layer.fan_out()) {
        return Err(Error::Invalid(format!(
            "label {bad} out of range for {} classes",
            layer.fan_out()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut adam = Adam::new(layer, config.learning_rate);
    let mut last = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = to_f64_rows(&layer.apply_batch(x.view()));
            let (loss, grad) = cross_entropy(&logits, &y)?;
            total += loss * chunk.len() as f64;
            let g = from_f64_rows(&grad);
            let grad_w = g.t().dot(&x);
            let grad_b = g.sum_axis(Axis(0));
            adam.step(layer, &grad_w, &grad_b);
        }
        last = total / labels.len() as f64;
    }
    Ok(last)
}

/// Freezes the body and fits the classification head on its embeddings.
pub fn train_classifier_head(
    network: &mut Network,
    inputs: ArrayView2<f32>,
    labels: &[usize],
    num_values: usize,
    config: &HeadConfig,
) -> Result<f64> {
    if network.spec.num_classes != num_values {
        return Err(Error::Invalid(format!(
            "attribute has {num_values} values but the network head has {} classes",
            network.spec.num_classes
        )));
    }
    if inputs.ncols() != network.spec.input_dim {
        return Err(Error::Dimension {
            expected: network.spec.input_dim,
            got: inputs.ncols(),
        });
    }
    network.body_frozen = true;
    let embeddings = network.embed_batch(inputs);
    let mut rng = seed::rng_for(config.seed, "head");
    let head = network
        .head
        .as_mut()
        .ok_or_else(|| Error::Invalid("network has no classification head".into()))?;
    fit_softmax(head, embeddings.view(), labels, config, &mut rng)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseRecord {
    /// Row-major `(fan_out, fan_in)`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Flat parameter arrays of a network, as stored in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkWeights {
    pub body_frozen: bool,
    pub layers: Vec<DenseRecord>,
    pub head: Option<DenseRecord>,
}

impl From<&Dense> for DenseRecord {
    fn from(d: &Dense) -> Self {
        DenseRecord {
            weights: d.weights.iter().copied().collect(),
            bias: d.bias.to_vec(),
        }
    }
}

fn dense_from(rec: DenseRecord, (fan_in, fan_out): (usize, usize)) -> Result<Dense> {
    let weights = Array2::from_shape_vec((fan_out, fan_in), rec.weights)
        .map_err(|_| Error::Invalid(format!("weight array is not {fan_out}x{fan_in}")))?;
    if rec.bias.len() != fan_out {
        return Err(Error::Invalid(format!(
            "bias has {} entries, expected {fan_out}",
            rec.bias.len()
        )));
    }
    Ok(Dense {
        weights,
        bias: Array1::from(rec.bias),
    })
}

impl Network {
    pub fn weights(&self) -> NetworkWeights {
        NetworkWeights {
            body_frozen: self.body_frozen,
            layers: self.layers.iter().map(DenseRecord::from).collect(),
            head: self.head.as_ref().map(DenseRecord::from),
        }
    }

    pub fn from_parts(spec: NetworkSpec, weights: NetworkWeights) -> Result<Network> {
        spec.validate()?;
        let shapes = spec.body_shapes();
        if weights.layers.len() != shapes.len() {
            return Err(Error::Invalid(format!(
                "{} weight layers for a spec with {}",
                weights.layers.len(),
                shapes.len()
            )));
        }
        let layers = weights
            .layers
            .into_iter()
            .zip(shapes)
            .map(|(l, s)| dense_from(l, s))
            .collect::<Result<Vec<_>>>()?;
        let head = match (weights.head, spec.head_shape()) {
            (Some(h), Some(s)) => Some(dense_from(h, s)?),
            (None, None) => None,
            _ => return Err(Error::Invalid("head presence disagrees with spec".into())),
        };
        Ok(Network {
            spec,
            layers,
            head,
            body_frozen: weights.body_frozen,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkRecord {
    spec: NetworkSpec,
    weights: NetworkWeights,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkRecord {
            spec: self.spec.clone(),
            weights: self.weights(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = NetworkRecord::deserialize(d)?;
        Network::from_parts(rec.spec, rec.weights).map_err(serde::de::Error::custom)
    }
}
