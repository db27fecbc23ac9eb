//! Conversation datasets: on-disk format, batching with padding masks, and
//! a synthetic-conversation generator for desk-scale verification.
//!
//! Dataset files hold one conversation per line as `<id>\t<json>` where the
//! json body is `{"id": ..., "utterances": [{"speaker", "label", "features"},
//! ...]}`. An utterance may replace `features` with `"fref": [offset, count]`
//! pointing into a raw little-endian f32 sidecar at `<path>.bin`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum;
use crate::error::{Error, Result};

/// Padded label slots carry this sentinel and are never scored.
pub const PAD_LABEL: i64 = -1;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: String,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Ordered utterances; list order is chronological order.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub label_names: Vec<String>,
    pub neutral_index: Option<usize>,
    difficulties: Vec<f64>,
    feature_dim: usize,
}

impl Dataset {
    /// Validates invariants and caches one difficulty score per
    /// conversation; difficulty depends only on gold labels.
    pub fn new(
        conversations: Vec<Conversation>,
        label_names: Option<Vec<String>>,
        neutral_index: Option<usize>,
    ) -> Result<Self> {
        let mut feature_dim = 0;
        let mut max_label = 0;
        for conv in &conversations {
            if conv.utterances.is_empty() {
                return Err(Error::Empty(format!("conversation {} has no utterances", conv.id)));
            }
            for utt in &conv.utterances {
                if feature_dim == 0 {
                    feature_dim = utt.features.len();
                }
                if utt.features.len() != feature_dim {
                    return Err(Error::Format(format!(
                        "conversation {}: feature dim {} differs from dataset dim {}",
                        conv.id,
                        utt.features.len(),
                        feature_dim
                    )));
                }
                max_label = max_label.max(utt.label);
            }
        }
        let label_names = match label_names {
            Some(names) => {
                for conv in &conversations {
                    for utt in &conv.utterances {
                        if utt.label >= names.len() {
                            return Err(Error::Label(format!(
                                "conversation {}: label {} outside {} classes",
                                conv.id,
                                utt.label,
                                names.len()
                            )));
                        }
                    }
                }
                names
            }
            None => (0..=max_label).map(|i| i.to_string()).collect(),
        };
        if let Some(n) = neutral_index {
            if n >= label_names.len() {
                return Err(Error::Label(format!(
                    "neutral index {n} outside {} classes",
                    label_names.len()
                )));
            }
        }
        let difficulties = conversations
            .iter()
            .map(curriculum::difficulty)
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            conversations,
            label_names,
            neutral_index,
            difficulties,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn difficulty(&self, conv_index: usize) -> f64 {
        self.difficulties[conv_index]
    }

    pub fn total_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Re-attach class names (and optional neutral class) from a label map.
    pub fn with_labels(mut self, label_names: Vec<String>, neutral_index: Option<usize>) -> Result<Self> {
        for conv in &self.conversations {
            for utt in &conv.utterances {
                if utt.label >= label_names.len() {
                    return Err(Error::Label(format!(
                        "conversation {}: label {} outside {} classes",
                        conv.id,
                        utt.label,
                        label_names.len()
                    )));
                }
            }
        }
        if let Some(n) = neutral_index {
            if n >= label_names.len() {
                return Err(Error::Label(format!(
                    "neutral index {n} outside {} classes",
                    label_names.len()
                )));
            }
        }
        self.label_names = label_names;
        self.neutral_index = neutral_index;
        Ok(self)
    }
}

/// Padded feature block for a group of conversations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// `[B, L_max, d]` row-major, padded rows zero.
    pub features: Vec<f64>,
    /// `[B, L_max]`, padded slots are [`PAD_LABEL`].
    pub labels: Vec<i64>,
    /// `[B, L_max]`, exactly the leading `n(i)` slots of each row are true.
    pub valid_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub conv_ids: Vec<String>,
    pub conv_difficulties: Vec<f64>,
}

impl Batch {
    pub fn valid_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Group conversations into padded batches of at most `batch_size`, each
/// padded to its own longest conversation. Order is deterministic for a
/// given rng state when `shuffle` is set.
pub fn make_batches<R: Rng>(
    ds: &Dataset,
    batch_size: usize,
    rng: &mut R,
    shuffle: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Range("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let d = ds.feature_dim();
    let k = ds.num_classes();
    let mut batches = Vec::new();
    for group in order.chunks(batch_size) {
        let max_len = group
            .iter()
            .map(|&i| ds.conversations[i].len())
            .max()
            .unwrap_or(0);
        let b = group.len();
        let mut features = vec![0.0; b * max_len * d];
        let mut labels = vec![PAD_LABEL; b * max_len];
        let mut valid_mask = vec![false; b * max_len];
        let mut lengths = Vec::with_capacity(b);
        let mut conv_ids = Vec::with_capacity(b);
        let mut conv_difficulties = Vec::with_capacity(b);
        for (row, &ci) in group.iter().enumerate() {
            let conv = &ds.conversations[ci];
            lengths.push(conv.len());
            conv_ids.push(conv.id.clone());
            conv_difficulties.push(ds.difficulty(ci));
            for (j, utt) in conv.utterances.iter().enumerate() {
                let base = (row * max_len + j) * d;
                features[base..base + d].copy_from_slice(&utt.features);
                labels[row * max_len + j] = utt.label as i64;
                valid_mask[row * max_len + j] = true;
            }
        }
        batches.push(Batch {
            size: b,
            max_len,
            feature_dim: d,
            num_classes: k,
            features,
            labels,
            valid_mask,
            lengths,
            conv_ids,
            conv_difficulties,
        });
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UttRecord {
    speaker: String,
    label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fref: Option<(u64, usize)>,
}

#[derive(Serialize, Deserialize)]
struct ConvRecord {
    id: String,
    utterances: Vec<UttRecord>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".bin");
    os.into()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut sidecar: Option<fs::File> = None;
    let mut conversations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (header, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing tab between conversation id and record".into(),
        })?;
        let record: ConvRecord = serde_json::from_str(body).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if record.id != header {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("header id {header:?} does not match record id {:?}", record.id),
            });
        }
        let mut utterances = Vec::with_capacity(record.utterances.len());
        for utt in record.utterances {
            if utt.label < 0 {
                return Err(Error::Label(format!(
                    "conversation {}: negative label {}",
                    record.id, utt.label
                )));
            }
            let features = match (utt.features, utt.fref) {
                (Some(f), None) => f,
                (None, Some((offset, count))) => {
                    let file = match sidecar.as_mut() {
                        Some(f) => f,
                        None => {
                            let p = sidecar_path(path);
                            sidecar = Some(
                                fs::File::open(&p)
                                    .map_err(|e| Error::io(p.display().to_string(), e))?,
                            );
                            sidecar.as_mut().unwrap()
                        }
                    };
                    read_f32_block(file, offset, count)
                        .map_err(|e| Error::io(sidecar_path(path).display().to_string(), e))?
                }
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!(
                            "conversation {}: utterance needs exactly one of features/fref",
                            record.id
                        ),
                    })
                }
            };
            utterances.push(Utterance {
                speaker: utt.speaker,
                label: utt.label as usize,
                features,
            });
        }
        conversations.push(Conversation {
            id: record.id,
            utterances,
        });
    }
    Dataset::new(conversations, None, None)
}

fn read_f32_block(file: &mut fs::File, offset: u64, count: usize) -> std::io::Result<Vec<f64>> {
    file.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; count * 4];
    file.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for conv in &ds.conversations {
        let record = ConvRecord {
            id: conv.id.clone(),
            utterances: conv
                .utterances
                .iter()
                .map(|u| UttRecord {
                    speaker: u.speaker.clone(),
                    label: u.label as i64,
                    features: Some(u.features.clone()),
                    fref: None,
                })
                .collect(),
        };
        let body = serde_json::to_string(&record).expect("record serializes");
        out.push_str(&conv.id);
        out.push('\t');
        out.push_str(&body);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Label map sidecar: one `<index>\t<name>` line per class, optional final
/// `neutral\t<index>` line.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<(Vec<String>, Option<usize>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut names: Vec<(usize, String)> = Vec::new();
    let mut neutral = None;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (left, right) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "expected <index>\\t<name>".into(),
        })?;
        if left == "neutral" {
            neutral = Some(right.trim().parse::<usize>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad neutral index: {e}"),
            })?);
            continue;
        }
        let idx: usize = left.trim().parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad class index: {e}"),
        })?;
        names.push((idx, right.to_string()));
    }
    names.sort_by_key(|(i, _)| *i);
    for (pos, (idx, _)) in names.iter().enumerate() {
        if *idx != pos {
            return Err(Error::Format(format!(
                "label map indices must cover 0..K contiguously, found {idx} at position {pos}"
            )));
        }
    }
    let names: Vec<String> = names.into_iter().map(|(_, n)| n).collect();
    if let Some(n) = neutral {
        if n >= names.len() {
            return Err(Error::Label(format!(
                "neutral index {n} outside {} classes",
                names.len()
            )));
        }
    }
    Ok((names, neutral))
}

// ---------------------------------------------------------------------------
// Synthetic conversations
// ---------------------------------------------------------------------------

/// Generator spec. Per speaker, labels form a Markov chain that moves to a
/// *different* label with probability `shift_prob`; features are the class
/// mean (pairwise separation `class_separation`) plus unit Gaussian noise.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_conversations: usize,
    pub speakers_per_conv: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub shift_prob: f64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_conversations == 0
            || self.speakers_per_conv == 0
            || self.len_min == 0
            || self.num_classes == 0
            || self.feature_dim == 0
        {
            return Err(Error::Config("synth spec fields must be positive".into()));
        }
        if self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "len range {}..{} is empty",
                self.len_min, self.len_max
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_prob) {
            return Err(Error::Range(format!(
                "shift_prob {} outside [0, 1]",
                self.shift_prob
            )));
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; 1 - u keeps the log argument strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn class_means<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<Vec<f64>> {
    // Scaled basis vectors give exact pairwise distance class_separation
    // when the feature dim allows; otherwise random directions of the same
    // norm approximate it.
    let scale = spec.class_separation / 2f64.sqrt();
    (0..spec.num_classes)
        .map(|k| {
            let mut mean = vec![0.0; spec.feature_dim];
            if spec.feature_dim >= spec.num_classes {
                mean[k] = scale;
            } else {
                let mut norm = 0.0;
                for m in mean.iter_mut() {
                    *m = normal(rng);
                    norm += *m * *m;
                }
                let norm = norm.sqrt().max(1e-12);
                for m in mean.iter_mut() {
                    *m *= scale / norm;
                }
            }
            mean
        })
        .collect()
}

pub fn synthesize<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let means = class_means(spec, rng);
    let mut conversations = Vec::with_capacity(spec.num_conversations);
    for c in 0..spec.num_conversations {
        let n = rng.gen_range(spec.len_min..=spec.len_max);
        let mut last_label: HashMap<usize, usize> = HashMap::new();
        let mut utterances = Vec::with_capacity(n);
        for _ in 0..n {
            let sp = rng.gen_range(0..spec.speakers_per_conv);
            let label = match last_label.get(&sp) {
                None => rng.gen_range(0..spec.num_classes),
                Some(&prev) => {
                    if spec.num_classes > 1 && rng.gen::<f64>() < spec.shift_prob {
                        let step = rng.gen_range(1..spec.num_classes);
                        (prev + step) % spec.num_classes
                    } else {
                        prev
                    }
                }
            };
            last_label.insert(sp, label);
            let features = means[label]
                .iter()
                .map(|&m| m + normal(rng))
                .collect();
            utterances.push(Utterance {
                speaker: format!("s{sp}"),
                label,
                features,
            });
        }
        conversations.push(Conversation {
            id: format!("synth-{c}"),
            utterances,
        });
    }
    Dataset::new(conversations, Some((0..spec.num_classes).map(|i| i.to_string()).collect()), None)
}

// ---------------------------------------------------------------------------
// Encoded-feature dump
// ---------------------------------------------------------------------------

/// One encoded utterance: the final pre-classifier vector plus identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub conv_id: String,
    pub utt_index: usize,
    pub label: usize,
    pub vector: Vec<f64>,
}

pub fn write_feature_dump(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let joined = r
            .vector
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{}\t{}\t{}\t{}", r.conv_id, r.utt_index, r.label, joined)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_feature_dump(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", parts.len()),
            });
        }
        let parse_err = |e: String| Error::Parse { line: lineno, msg: e };
        records.push(FeatureRecord {
            conv_id: parts[0].to_string(),
            utt_index: parts[1].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            label: parts[2].parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            vector: parts[3]
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(records)
}
