//! Experiment configuration in TOML.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/dual-s0"
//! task_order = [0, 1, 2]        # optional, defaults to [[task]] order
//! epochs_per_stage = 100        # optional
//! batch_size = 84               # optional
//! lr = 0.001                    # optional
//! lr_decay_epoch_fraction = 0.6 # optional
//! buffer_capacity = 300         # optional
//!
//! [topology]                    # optional, every key optional
//! trunk_dim = 48
//!
//! [strategy]
//! kind = "replay_dual"          # required
//! gamma = 0.5
//!
//! [[task]]
//! language_id = 0               # required
//! n_train = 3000
//! ```
//!
//! Unknown keys are rejected. Errors carry the dotted key path.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::ModelTopology;
use crate::rng;
use crate::strategies::{StageConfig, StrategyConfig, StrategyKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task_order: Vec<u32>,
    /// One spec per language, in task order.
    pub tasks: Vec<TaskSpec>,
    pub topology: ModelTopology,
    pub strategy: StrategyConfig,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epoch_fraction: f64,
    pub buffer_capacity: usize,
    /// Smoothing factor of the learning-curve CSV.
    pub curve_smoothing: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    vocab_size: Option<usize>,
    embed_dim: Option<usize>,
    encoder_hidden: Option<usize>,
    trunk_dim: Option<usize>,
    frame_dim: Option<usize>,
    postnet_hidden: Option<usize>,
    num_languages: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    language_id: u32,
    seed: Option<u64>,
    n_train: Option<usize>,
    n_dev: Option<usize>,
    n_test: Option<usize>,
    seq_len_min: Option<usize>,
    seq_len_max: Option<usize>,
    transform_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    task_order: Option<Vec<u32>>,
    epochs_per_stage: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    lr_decay_epoch_fraction: Option<f64>,
    buffer_capacity: Option<usize>,
    curve_smoothing: Option<f64>,
    #[serde(default)]
    topology: RawTopology,
    strategy: StrategyConfig,
    task: Vec<RawTask>,
}

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH: usize = 84;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_DECAY_FRACTION: f64 = 0.6;
pub const DEFAULT_BUFFER: usize = 300;
pub const DEFAULT_SMOOTHING: f64 = 0.5;

/// Default network sizes for `num_languages` languages.
pub fn default_topology(num_languages: usize) -> ModelTopology {
    ModelTopology {
        vocab_size: 96,
        embed_dim: 8,
        encoder_hidden: 32,
        trunk_dim: 48,
        frame_dim: 6,
        postnet_hidden: 8,
        num_languages,
    }
}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a config, applying defaults for omitted keys.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| cfg_err("", e.to_string().trim().to_owned()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(if path == "." { String::new() } else { path }, e.into_inner().message().to_owned())
    })?;
    ExperimentConfig::from_raw(raw)
}

impl ExperimentConfig {
    fn from_raw(raw: RawConfig) -> Result<Self> {
        let seed = raw.seed.unwrap_or(0);
        if raw.task.is_empty() {
            return Err(cfg_err("task", "at least one [[task]] block is required"));
        }
        let mut block_ids = Vec::new();
        for (i, t) in raw.task.iter().enumerate() {
            if block_ids.contains(&t.language_id) {
                return Err(cfg_err(
                    format!("task[{i}].language_id"),
                    format!("duplicate language id {}", t.language_id),
                ));
            }
            block_ids.push(t.language_id);
        }
        let task_order = raw.task_order.clone().unwrap_or_else(|| block_ids.clone());
        for (i, id) in task_order.iter().enumerate() {
            if task_order[..i].contains(id) {
                return Err(cfg_err(format!("task_order[{i}]"), format!("duplicate language id {id}")));
            }
            if !block_ids.contains(id) {
                return Err(cfg_err(format!("task_order[{i}]"), format!("no [[task]] block for language {id}")));
            }
        }
        if task_order.len() != block_ids.len() {
            return Err(cfg_err("task_order", "every [[task]] block must appear in task_order"));
        }

        let max_id = *block_ids.iter().max().unwrap() as usize;
        let t = &raw.topology;
        let d = default_topology(t.num_languages.unwrap_or(max_id + 1));
        let topology = ModelTopology {
            vocab_size: t.vocab_size.unwrap_or(d.vocab_size),
            embed_dim: t.embed_dim.unwrap_or(d.embed_dim),
            encoder_hidden: t.encoder_hidden.unwrap_or(d.encoder_hidden),
            trunk_dim: t.trunk_dim.unwrap_or(d.trunk_dim),
            frame_dim: t.frame_dim.unwrap_or(d.frame_dim),
            postnet_hidden: t.postnet_hidden.unwrap_or(d.postnet_hidden),
            num_languages: d.num_languages,
        };
        topology.validate().map_err(|e| cfg_err("topology", e.to_string()))?;
        if max_id >= topology.num_languages {
            return Err(cfg_err(
                "topology.num_languages",
                format!("language id {max_id} needs at least {} languages", max_id + 1),
            ));
        }

        let tasks = task_order
            .iter()
            .map(|id| {
                let i = block_ids.iter().position(|b| b == id).unwrap();
                let rt = &raw.task[i];
                let spec = TaskSpec {
                    language_id: *id,
                    seed: rt.seed.unwrap_or_else(|| rng::derive_seed(seed, "task", *id as u64)),
                    n_train: rt.n_train.unwrap_or(3000),
                    n_dev: rt.n_dev.unwrap_or(20),
                    n_test: rt.n_test.unwrap_or(20),
                    seq_len_range: (rt.seq_len_min.unwrap_or(4), rt.seq_len_max.unwrap_or(8)),
                    transform_scale: rt.transform_scale.unwrap_or(1.0),
                };
                spec.validate().map_err(|e| cfg_err(format!("task[{i}]"), e.to_string()))?;
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?;

        let cfg = Self {
            seed,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("run")),
            task_order,
            tasks,
            topology,
            strategy: raw.strategy,
            epochs_per_stage: raw.epochs_per_stage.unwrap_or(DEFAULT_EPOCHS),
            batch_size: raw.batch_size.unwrap_or(DEFAULT_BATCH),
            lr: raw.lr.unwrap_or(DEFAULT_LR),
            lr_decay_epoch_fraction: raw.lr_decay_epoch_fraction.unwrap_or(DEFAULT_DECAY_FRACTION),
            buffer_capacity: raw.buffer_capacity.unwrap_or(DEFAULT_BUFFER),
            curve_smoothing: raw.curve_smoothing.unwrap_or(DEFAULT_SMOOTHING),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if self.epochs_per_stage == 0 {
            return Err(cfg_err("epochs_per_stage", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_epoch_fraction) {
            return Err(cfg_err("lr_decay_epoch_fraction", "must lie in [0, 1]"));
        }
        if self.strategy.kind.uses_buffer() && self.buffer_capacity == 0 {
            return Err(cfg_err("buffer_capacity", "replay strategies need a non-empty buffer"));
        }
        if !(0.0..1.0).contains(&self.curve_smoothing) {
            return Err(cfg_err("curve_smoothing", "must lie in [0, 1)"));
        }
        if self.tasks.len() != self.task_order.len()
            || self.tasks.iter().zip(&self.task_order).any(|(t, id)| t.language_id != *id)
        {
            return Err(cfg_err("task", "task specs do not follow task_order"));
        }
        if self.strategy.kind == StrategyKind::ReplayDual
            && self.strategy.lbs_sampler == crate::strategies::LbsSampler::Balanced
            && self.batch_size < self.tasks.len()
        {
            return Err(cfg_err("batch_size", "balanced batches need at least one sample per language"));
        }
        Ok(())
    }

    /// Emits a complete config (every default spelled out) that parses back to `self`.
    pub fn to_toml(&self) -> String {
        let t = &self.topology;
        let raw = RawConfig {
            seed: Some(self.seed),
            output_dir: Some(self.output_dir.clone()),
            task_order: Some(self.task_order.clone()),
            epochs_per_stage: Some(self.epochs_per_stage),
            batch_size: Some(self.batch_size),
            lr: Some(self.lr),
            lr_decay_epoch_fraction: Some(self.lr_decay_epoch_fraction),
            buffer_capacity: Some(self.buffer_capacity),
            curve_smoothing: Some(self.curve_smoothing),
            topology: RawTopology {
                vocab_size: Some(t.vocab_size),
                embed_dim: Some(t.embed_dim),
                encoder_hidden: Some(t.encoder_hidden),
                trunk_dim: Some(t.trunk_dim),
                frame_dim: Some(t.frame_dim),
                postnet_hidden: Some(t.postnet_hidden),
                num_languages: Some(t.num_languages),
            },
            strategy: self.strategy.clone(),
            task: self
                .tasks
                .iter()
                .map(|s| RawTask {
                    language_id: s.language_id,
                    seed: Some(s.seed),
                    n_train: Some(s.n_train),
                    n_dev: Some(s.n_dev),
                    n_test: Some(s.n_test),
                    seq_len_min: Some(s.seq_len_range.0),
                    seq_len_max: Some(s.seq_len_range.1),
                    transform_scale: Some(s.transform_scale),
                })
                .collect(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    /// SHA-256 of the emitted config with `output_dir` blanked, so a run can be
    /// moved without invalidating its checkpoints.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            epochs: self.epochs_per_stage,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_epoch_fraction: self.lr_decay_epoch_fraction,
            num_languages: self.topology.num_languages,
            track_dev: true,
        }
    }

    /// The compact profile used for desk-scale strategy comparisons: three tasks
    /// of 1500 training samples, 40 epochs per stage, batch 32, buffer 120.
    pub fn desk_profile(kind: StrategyKind, seed: u64) -> Self {
        let tasks = (0..3u32)
            .map(|l| TaskSpec {
                n_train: 1500,
                ..TaskSpec::new(l, rng::derive_seed(seed, "task", l as u64))
            })
            .collect();
        Self {
            seed,
            output_dir: PathBuf::from(format!("runs/{}-s{seed}", kind.name())),
            task_order: vec![0, 1, 2],
            tasks,
            topology: default_topology(3),
            strategy: StrategyConfig::new(kind),
            epochs_per_stage: 40,
            batch_size: 32,
            lr: DEFAULT_LR,
            lr_decay_epoch_fraction: DEFAULT_DECAY_FRACTION,
            buffer_capacity: 120,
            curve_smoothing: DEFAULT_SMOOTHING,
        }
    }
}
