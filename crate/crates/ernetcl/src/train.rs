//! Epoch loop wiring curriculum weights into the loss, model selection by
//! validation weighted F1, and dataset-level evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::curriculum::{weight, CurriculumSchedule};
use crate::data::{make_batches, Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::metrics::{report, MetricsReport};
use crate::model::{forward_pass, init_params, loss_graph, predict, ModelConfig, ModelParams};
use crate::nn::Mode;
use crate::optim::{adamw_step, AdamW, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainFlags {
    /// Drop the temporal-encoder stack.
    pub no_te: bool,
    /// Drop the spatial-encoder stack.
    pub no_se: bool,
    /// Replace the curriculum loss with the plain cross-entropy (all
    /// conversation weights pinned to 1).
    pub no_cl: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
    pub val_micro_f1: f64,
    /// Wall time is a measurement, not part of the deterministic record.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochStats>,
}

impl RunHistory {
    /// Bitwise equality over the computed fields, ignoring wall time.
    pub fn deterministic_eq(&self, other: &RunHistory) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_weighted_f1.to_bits() == b.val_weighted_f1.to_bits()
                    && a.val_micro_f1.to_bits() == b.val_micro_f1.to_bits()
            })
    }
}

fn check_dataset(cfg: &ModelConfig, ds: &Dataset, role: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Empty(format!("{role} dataset has no conversations")));
    }
    if ds.feature_dim() != cfg.feature_dim {
        return Err(Error::Config(format!(
            "{role} dataset has feature dim {}, config says {}",
            ds.feature_dim(),
            cfg.feature_dim
        )));
    }
    if ds.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "{role} dataset has {} classes, config says {}",
            ds.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Fill feature_dim / num_classes left at zero from the dataset.
pub fn infer_dims(cfg: &mut ModelConfig, ds: &Dataset) {
    if cfg.feature_dim == 0 {
        cfg.feature_dim = ds.feature_dim();
    }
    if cfg.num_classes == 0 {
        cfg.num_classes = ds.num_classes();
    }
}

/// Full training run. Deterministic for a given config: init, per-epoch
/// shuffling, and dropout all draw from one seeded generator. Returns the
/// checkpoint with the best validation weighted F1 and the epoch history.
pub fn train(
    cfg: &ModelConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    flags: TrainFlags,
) -> Result<(Checkpoint, RunHistory)> {
    let mut cfg = cfg.clone();
    infer_dims(&mut cfg, train_ds);
    if flags.no_te {
        cfg.depth_te = 0;
    }
    if flags.no_se {
        cfg.depth_se = 0;
    }
    cfg.validate()?;
    check_dataset(&cfg, train_ds, "train")?;
    check_dataset(&cfg, val_ds, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(&cfg, &mut rng)?;
    let mut history = RunHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((Checkpoint { config: cfg, params }, history));
    }

    let sched = CurriculumSchedule::new(cfg.sigma, cfg.delta, cfg.max_epochs)?;
    let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut state = OptimizerState::new(&params);
    let mut best = params.clone();
    let mut best_f1 = f64::NEG_INFINITY;

    for t in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches = make_batches(train_ds, cfg.batch_size, &mut rng, true)?;
        let mut nll_sum = 0.0;
        let mut n_sum = 0usize;
        for batch in &batches {
            let weights: Vec<f64> = if flags.no_cl {
                vec![1.0; batch.size]
            } else {
                batch
                    .conv_difficulties
                    .iter()
                    .map(|&d| weight(t, d, &sched))
                    .collect::<Result<Vec<_>>>()?
            };
            let mut fp = forward_pass(&params, batch, Mode::Train, &mut rng)?;
            let loss_id = loss_graph(&mut fp, batch, &weights)?;
            let loss = fp.graph.value(loss_id).values()[0];
            fp.graph.backward(loss_id)?;
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.tensor_count());
            fp.bound.visit(&mut |_, &id| {
                grads.push(fp.graph.grad(id).expect("backward ran").to_vec());
            });
            adamw_step(&opt, &mut params, &grads, &mut state)?;
            nll_sum += loss * batch.valid_count() as f64;
            n_sum += batch.valid_count();
        }
        let val = evaluate_params(&params, &cfg, val_ds)?;
        if val.weighted_f1 > best_f1 {
            best_f1 = val.weighted_f1;
            best = params.clone();
        }
        history.epochs.push(EpochStats {
            epoch: t,
            train_loss: nll_sum / n_sum as f64,
            val_weighted_f1: val.weighted_f1,
            val_micro_f1: val.micro_f1,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((Checkpoint { config: cfg, params: best }, history))
}

/// Eval-mode predictions over a whole dataset.
pub fn evaluate_params(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    ds: &Dataset,
) -> Result<MetricsReport> {
    check_dataset(cfg, ds, "evaluation")?;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let batches = make_batches(ds, cfg.batch_size, &mut unused, false)?;
    let mut gold = Vec::with_capacity(ds.total_utterances());
    let mut pred = Vec::with_capacity(ds.total_utterances());
    let k = cfg.num_classes;
    for batch in &batches {
        let fp = forward_pass(params, batch, Mode::Eval, &mut unused)?;
        for b in 0..batch.size {
            for j in 0..batch.lengths[b] {
                let slot = b * batch.max_len + j;
                gold.push(batch.labels[slot] as usize);
                pred.push(predict(&fp.probs[slot * k..(slot + 1) * k]));
            }
        }
    }
    report(&gold, &pred, &ds.label_names, ds.neutral_index)
}

pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset) -> Result<MetricsReport> {
    evaluate_params(&ckpt.params, &ckpt.config, ds)
}

/// Final pre-classifier vectors for every valid utterance, in dataset
/// order. Eval mode, so repeated calls produce identical records.
pub fn encode_dataset(ckpt: &Checkpoint, ds: &Dataset) -> Result<Vec<FeatureRecord>> {
    check_dataset(&ckpt.config, ds, "dump")?;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let batches = make_batches(ds, ckpt.config.batch_size, &mut unused, false)?;
    let mut records = Vec::with_capacity(ds.total_utterances());
    let d = ckpt.config.feature_dim;
    for batch in &batches {
        let fp = forward_pass(&ckpt.params, batch, Mode::Eval, &mut unused)?;
        for b in 0..batch.size {
            let encoded = fp.graph.value(fp.conv_encoded[b]).values();
            for j in 0..batch.lengths[b] {
                records.push(FeatureRecord {
                    conv_id: batch.conv_ids[b].clone(),
                    utt_index: j,
                    label: batch.labels[b * batch.max_len + j] as usize,
                    vector: encoded[j * d..(j + 1) * d].to_vec(),
                });
            }
        }
    }
    Ok(records)
}

/// Write the encoded-feature dump for a dataset.
pub fn dump_features(ckpt: &Checkpoint, ds: &Dataset, path: impl AsRef<std::path::Path>) -> Result<()> {
    let records = encode_dataset(ckpt, ds)?;
    crate::data::write_feature_dump(&records, path)
}
