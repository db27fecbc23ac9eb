//! The full network: stacked temporal-encoder layers, stacked
//! spatial-encoder layers, and the emotion classifier, plus the unweighted
//! loss used for evaluation and the curriculum-free ablation.

use rand::Rng;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, AffineParams, Mode};
use crate::spatial::{se_layer, SeLayerParams};
use crate::temporal::{te_layer, TeLayerParams};
use crate::tensor::{Graph, Tensor, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub depth_te: usize,
    pub depth_se: usize,
    pub heads: usize,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub sigma: f64,
    pub delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 0,
            num_classes: 0,
            depth_te: 2,
            depth_se: 2,
            heads: 4,
            dropout_rate: 0.1,
            max_epochs: 100,
            sigma: 0.5,
            delta: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 3e-4,
            seed: 2023,
        }
    }
}

impl ModelConfig {
    pub fn meld() -> Self {
        ModelConfig {
            learning_rate: 1e-5,
            delta: 10.0,
            sigma: 0.4,
            batch_size: 128,
            depth_te: 4,
            depth_se: 4,
            dropout_rate: 0.2,
            ..Default::default()
        }
    }

    pub fn iemocap() -> Self {
        ModelConfig {
            learning_rate: 1e-4,
            delta: 9.0,
            sigma: 0.7,
            batch_size: 64,
            depth_te: 2,
            depth_se: 6,
            dropout_rate: 0.1,
            ..Default::default()
        }
    }

    pub fn emorynlp() -> Self {
        ModelConfig {
            learning_rate: 1e-5,
            delta: 7.0,
            sigma: 0.6,
            batch_size: 128,
            depth_te: 4,
            depth_se: 3,
            dropout_rate: 0.2,
            ..Default::default()
        }
    }

    pub fn dailydialog() -> Self {
        ModelConfig {
            learning_rate: 1e-5,
            delta: 9.0,
            sigma: 0.6,
            batch_size: 128,
            depth_te: 3,
            depth_se: 6,
            dropout_rate: 0.2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be set (or inferred from data)".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be set (or inferred from data)".into()));
        }
        if self.depth_se > 0 && (self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads)) {
            return Err(Error::Config(format!(
                "head count {} must divide feature dim {}",
                self.heads, self.feature_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if self.delta < 1.0 {
            return Err(Error::Config(format!("delta {} must be >= 1", self.delta)));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor, grouped by block.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub te_layers: Vec<TeLayerParams<T>>,
    pub se_layers: Vec<SeLayerParams<T>>,
    pub classifier: AffineParams<T>,
}

impl<T> ModelParams<T> {
    /// Visit every tensor with a stable name, in a fixed order shared with
    /// `visit_mut` and `map`.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        for (i, layer) in self.te_layers.iter().enumerate() {
            layer.visit(&format!("te.{i}"), f);
        }
        for (i, layer) in self.se_layers.iter().enumerate() {
            layer.visit(&format!("se.{i}"), f);
        }
        self.classifier.visit("classifier", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        for (i, layer) in self.te_layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("te.{i}"), f);
        }
        for (i, layer) in self.se_layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("se.{i}"), f);
        }
        self.classifier.visit_mut("classifier", f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            te_layers: self.te_layers.iter().map(|l| l.map(f)).collect(),
            se_layers: self.se_layers.iter().map(|l| l.map(f)).collect(),
            classifier: self.classifier.map(f),
        }
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }
}

impl ModelParams<Tensor> {
    /// Mount every tensor as a graph leaf, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<TensorId> {
        self.map(&mut |t| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            g.leaf(t)
        })
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Deterministic for a given seed: same config and rng state give bitwise
/// identical parameters.
pub fn init_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ModelParams<Tensor>> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let te_layers = (0..cfg.depth_te)
        .map(|_| TeLayerParams::init(d, cfg.dropout_rate, rng))
        .collect::<Result<Vec<_>>>()?;
    let se_layers = (0..cfg.depth_se)
        .map(|_| SeLayerParams::init(d, cfg.heads, cfg.dropout_rate, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        te_layers,
        se_layers,
        classifier: AffineParams::init(cfg.num_classes, d, rng)?,
    })
}

/// One batch forward, with the graph and per-conversation node handles kept
/// alive for the loss and backward pass.
pub struct ForwardPass {
    pub graph: Graph,
    pub bound: ModelParams<TensorId>,
    /// Per conversation, `[n(i), K]` class probabilities.
    pub conv_probs: Vec<TensorId>,
    /// Per conversation, `[n(i), d]` final pre-classifier features.
    pub conv_encoded: Vec<TensorId>,
    /// `[B, L_max, K]` row-major, padded rows zero.
    pub probs: Vec<f64>,
}

pub fn forward_pass<R: Rng>(
    params: &ModelParams<Tensor>,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardPass> {
    let d = params.classifier.in_dim();
    let k = params.classifier.out_dim();
    if batch.feature_dim != d {
        return Err(Error::ShapeMismatch {
            op: "forward features",
            lhs: vec![d],
            rhs: vec![batch.feature_dim],
        });
    }
    if batch.num_classes != k {
        return Err(Error::Config(format!(
            "batch has {} classes, model expects {k}",
            batch.num_classes
        )));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, mode == Mode::Train);
    let mut conv_probs = Vec::with_capacity(batch.size);
    let mut conv_encoded = Vec::with_capacity(batch.size);
    let mut probs = vec![0.0; batch.size * batch.max_len * k];
    for b in 0..batch.size {
        let n = batch.lengths[b];
        if n == 0 {
            return Err(Error::Empty(format!("conversation {} is empty", batch.conv_ids[b])));
        }
        let base = b * batch.max_len * d;
        let feats = batch.features[base..base + n * d].to_vec();
        let mut h = graph.constant(&[n, d], feats)?;
        for layer in &bound.te_layers {
            h = te_layer(&mut graph, h, n, layer, mode, rng)?;
        }
        let mask = vec![true; n];
        for layer in &bound.se_layers {
            h = se_layer(&mut graph, h, &mask, layer, mode, rng)?;
        }
        conv_encoded.push(h);
        let logits = nn::linear(&mut graph, h, &bound.classifier)?;
        let p = graph.softmax(logits);
        conv_probs.push(p);
        for (j, row) in graph.value(p).values().chunks(k).enumerate() {
            let out = (b * batch.max_len + j) * k;
            probs[out..out + k].copy_from_slice(row);
        }
    }
    Ok(ForwardPass {
        graph,
        bound,
        conv_probs,
        conv_encoded,
        probs,
    })
}

/// Class probabilities only, `[B, L_max, K]` with zero padded rows.
pub fn forward<R: Rng>(
    params: &ModelParams<Tensor>,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(forward_pass(params, batch, mode, rng)?.probs)
}

/// Append the curriculum-weighted negative log-likelihood to a forward
/// pass: `-(1/N) sum_i w_i sum_j log p[true]` over valid utterances.
pub fn loss_graph(fp: &mut ForwardPass, batch: &Batch, weights: &[f64]) -> Result<TensorId> {
    if weights.len() != batch.size {
        return Err(Error::ShapeMismatch {
            op: "loss weights",
            lhs: vec![batch.size],
            rhs: vec![weights.len()],
        });
    }
    let k = batch.num_classes;
    let g = &mut fp.graph;
    let mut acc = g.scalar(0.0);
    let mut n = 0usize;
    for b in 0..batch.size {
        let len = batch.lengths[b];
        let mut onehot = vec![0.0; len * k];
        for j in 0..len {
            let label = batch.labels[b * batch.max_len + j];
            if label < 0 || label as usize >= k {
                return Err(Error::Label(format!(
                    "label {label} outside [0, {k}) in conversation {}",
                    batch.conv_ids[b]
                )));
            }
            onehot[j * k + label as usize] = 1.0;
        }
        n += len;
        let onehot = g.constant(&[len, k], onehot)?;
        let logp = g.log_clamped(fp.conv_probs[b]);
        let picked = g.mul(logp, onehot)?;
        let s = g.sum(picked, None)?;
        let s = g.scale(s, weights[b]);
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, -1.0 / n as f64))
}

/// Index of the maximum probability; ties break toward the lowest index.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Unweighted cross-entropy over valid utterances of a padded batch,
/// normalized by the valid count.
pub fn standard_loss(probs: &[f64], batch: &Batch) -> Result<f64> {
    let k = batch.num_classes;
    if probs.len() != batch.size * batch.max_len * k {
        return Err(Error::ShapeMismatch {
            op: "standard_loss probs",
            lhs: vec![batch.size, batch.max_len, k],
            rhs: vec![probs.len()],
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for b in 0..batch.size {
        for j in 0..batch.lengths[b] {
            let slot = b * batch.max_len + j;
            let label = batch.labels[slot];
            if label < 0 || label as usize >= k {
                return Err(Error::Label(format!(
                    "label {label} outside [0, {k}) in conversation {}",
                    batch.conv_ids[b]
                )));
            }
            total += probs[slot * k + label as usize].max(1e-12).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("batch has no valid utterances".into()));
    }
    Ok(-total / n as f64)
}
