//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("expected key = value, got {raw:?}"),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|e| Error::Config(format!("bad value for {key}: {e}"))),
    }
}

fn known_keys(map: &BTreeMap<String, String>, allowed: &[&str]) -> Result<()> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key {key}")));
        }
    }
    Ok(())
}

const MODEL_KEYS: &[&str] = &[
    "feature_dim",
    "num_classes",
    "depth_te",
    "depth_se",
    "heads",
    "dropout_rate",
    "max_epochs",
    "sigma",
    "delta",
    "learning_rate",
    "batch_size",
    "weight_decay",
    "seed",
];

/// Model config from key/value text. `feature_dim` and `num_classes` may be
/// omitted (left at 0) and inferred from the dataset by the caller.
pub fn model_config_from_kv(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    known_keys(map, MODEL_KEYS)?;
    let d = ModelConfig::default();
    Ok(ModelConfig {
        feature_dim: get(map, "feature_dim", 0)?,
        num_classes: get(map, "num_classes", 0)?,
        depth_te: get(map, "depth_te", d.depth_te)?,
        depth_se: get(map, "depth_se", d.depth_se)?,
        heads: get(map, "heads", d.heads)?,
        dropout_rate: get(map, "dropout_rate", d.dropout_rate)?,
        max_epochs: get(map, "max_epochs", d.max_epochs)?,
        sigma: get(map, "sigma", d.sigma)?,
        delta: get(map, "delta", d.delta)?,
        learning_rate: get(map, "learning_rate", d.learning_rate)?,
        batch_size: get(map, "batch_size", d.batch_size)?,
        weight_decay: get(map, "weight_decay", d.weight_decay)?,
        seed: get(map, "seed", d.seed)?,
    })
}

pub fn load_model_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    model_config_from_kv(&parse_kv(&text)?)
}

pub fn model_config_to_kv(cfg: &ModelConfig) -> String {
    format!(
        "feature_dim = {}\nnum_classes = {}\ndepth_te = {}\ndepth_se = {}\nheads = {}\n\
         dropout_rate = {}\nmax_epochs = {}\nsigma = {}\ndelta = {}\nlearning_rate = {}\n\
         batch_size = {}\nweight_decay = {}\nseed = {}\n",
        cfg.feature_dim,
        cfg.num_classes,
        cfg.depth_te,
        cfg.depth_se,
        cfg.heads,
        cfg.dropout_rate,
        cfg.max_epochs,
        cfg.sigma,
        cfg.delta,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.weight_decay,
        cfg.seed
    )
}

const SYNTH_KEYS: &[&str] = &[
    "num_conversations",
    "speakers_per_conv",
    "len_min",
    "len_max",
    "num_classes",
    "feature_dim",
    "class_separation",
    "shift_prob",
];

pub fn synth_spec_from_kv(map: &BTreeMap<String, String>) -> Result<SynthSpec> {
    known_keys(map, SYNTH_KEYS)?;
    Ok(SynthSpec {
        num_conversations: get(map, "num_conversations", 50)?,
        speakers_per_conv: get(map, "speakers_per_conv", 2)?,
        len_min: get(map, "len_min", 4)?,
        len_max: get(map, "len_max", 12)?,
        num_classes: get(map, "num_classes", 4)?,
        feature_dim: get(map, "feature_dim", 16)?,
        class_separation: get(map, "class_separation", 10.0)?,
        shift_prob: get(map, "shift_prob", 0.5)?,
    })
}

pub fn load_synth_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    synth_spec_from_kv(&parse_kv(&text)?)
}
