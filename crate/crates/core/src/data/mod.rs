//! Synthetic pseudo-language tasks and the merged replay view.
//!
//! Every language owns a fixed random affine map from a shared token embedding
//! space to frame space; targets are `scale * tanh(W_l e_token + b_l)` per
//! position. All languages share the same tokens, so fitting one language pulls
//! shared model parameters away from the others.

pub(crate) mod format;

pub use format::{load_dataset, save_dataset, FORMAT_VERSION, MAGIC};

use std::collections::{BTreeMap, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::rng;

/// Width of the generator's private token embedding.
const GENERATOR_EMBED: usize = 8;
/// Fixed seed for the generator's world (token embedding and language maps).
const WORLD_SEED: u64 = 0x4c4c_5454_5331;
/// Pre-activation gain of the language maps.
const MAP_GAIN: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Identity of a generated sample: which task, which split, which position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub language_id: u32,
    pub split: Split,
    pub index: u32,
}

/// One utterance: a token sequence and its time-aligned target frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub tokens: Vec<u32>,
    /// Row-major `tokens.len() x frame_dim`.
    pub frames: Vec<f64>,
    pub frame_dim: usize,
}

impl Sample {
    pub fn language_id(&self) -> u32 {
        self.id.language_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.frame_dim..(t + 1) * self.frame_dim]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!("sample {:?} has no tokens", self.id)));
        }
        if self.frames.len() != self.tokens.len() * self.frame_dim {
            return Err(Error::Validation(format!(
                "sample {:?}: {} frame values for {} tokens of dim {}",
                self.id,
                self.frames.len(),
                self.tokens.len(),
                self.frame_dim
            )));
        }
        if let Some(&tok) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Validation(format!(
                "sample {:?}: token {tok} >= vocab size {vocab_size}",
                self.id
            )));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sample {:?}: non-finite frame", self.id)));
        }
        Ok(())
    }
}

/// Parameters for generating one synthetic language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub language_id: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seq_len_range: (usize, usize),
    pub transform_scale: f64,
}

impl TaskSpec {
    pub fn new(language_id: u32, seed: u64) -> Self {
        Self {
            language_id,
            seed,
            n_train: 3000,
            n_dev: 20,
            n_test: 20,
            seq_len_range: (4, 8),
            transform_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Validation(format!(
                "task {}: split sizes must be >= 1",
                self.language_id
            )));
        }
        let (lo, hi) = self.seq_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Validation(format!(
                "task {}: invalid sequence length range ({lo}, {hi})",
                self.language_id
            )));
        }
        if !(self.transform_scale.is_finite() && self.transform_scale > 0.0) {
            return Err(Error::Validation(format!(
                "task {}: transform_scale must be positive",
                self.language_id
            )));
        }
        Ok(())
    }
}

/// The train/dev/test splits of one language.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub language_id: u32,
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Checks sample invariants, language ownership, ids and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            for (i, s) in self.split(split).iter().enumerate() {
                s.validate(self.vocab_size)?;
                if s.frame_dim != self.frame_dim {
                    return Err(Error::Validation(format!("sample {:?}: wrong frame_dim", s.id)));
                }
                let expected = SampleId {
                    language_id: self.language_id,
                    split,
                    index: i as u32,
                };
                if s.id != expected {
                    return Err(Error::Validation(format!(
                        "sample {:?} found where {expected:?} was expected",
                        s.id
                    )));
                }
                if !seen.insert(s.tokens.as_slice()) {
                    return Err(Error::Validation(format!(
                        "sample {:?} duplicates another sample's tokens",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The fixed per-language target transform.
struct LanguageMap {
    /// `vocab x GENERATOR_EMBED`, shared by all languages.
    embedding: Vec<f64>,
    /// `frame_dim x GENERATOR_EMBED`.
    weight: Vec<f64>,
    offset: Vec<f64>,
    frame_dim: usize,
    scale: f64,
}

impl LanguageMap {
    fn new(language_id: u32, vocab_size: usize, frame_dim: usize, scale: f64) -> Self {
        let mut emb_rng = rng::stream(WORLD_SEED, "token-embedding", 0);
        let embedding = (0..vocab_size * GENERATOR_EMBED)
            .map(|_| emb_rng.gen_range(-1.0..1.0))
            .collect();
        let mut map_rng = rng::stream(WORLD_SEED, "language-map", language_id as u64);
        let bound = (3.0 / GENERATOR_EMBED as f64).sqrt();
        let weight = (0..frame_dim * GENERATOR_EMBED)
            .map(|_| map_rng.gen_range(-bound..bound))
            .collect();
        let offset = (0..frame_dim).map(|_| map_rng.gen_range(-0.5..0.5)).collect();
        Self {
            embedding,
            weight,
            offset,
            frame_dim,
            scale,
        }
    }

    fn frame(&self, token: u32, out: &mut Vec<f64>) {
        let e = &self.embedding[token as usize * GENERATOR_EMBED..][..GENERATOR_EMBED];
        for d in 0..self.frame_dim {
            let w = &self.weight[d * GENERATOR_EMBED..][..GENERATOR_EMBED];
            let z: f64 = w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + self.offset[d];
            out.push(self.scale * (MAP_GAIN * z).tanh());
        }
    }
}

/// Generates one language's splits. Deterministic in `spec`; token sequences are
/// unique across all three splits.
pub fn generate_task(spec: &TaskSpec, vocab_size: usize, frame_dim: usize) -> Result<TaskDataset> {
    spec.validate()?;
    if vocab_size == 0 || frame_dim == 0 {
        return Err(Error::Validation("vocab_size and frame_dim must be >= 1".into()));
    }
    let (lo, hi) = spec.seq_len_range;
    let capacity: f64 = (lo..=hi).map(|t| (vocab_size as f64).powi(t as i32)).sum();
    let wanted = spec.n_train + spec.n_dev + spec.n_test;
    if (wanted as f64) > capacity / 2.0 {
        return Err(Error::Validation(format!(
            "task {}: {wanted} unique sequences requested from a space of {capacity}",
            spec.language_id
        )));
    }

    let map = LanguageMap::new(spec.language_id, vocab_size, frame_dim, spec.transform_scale);
    let mut rng = rng::stream(spec.seed, "task-samples", spec.language_id as u64);
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(wanted);
    let mut make_split = |split: Split, n: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let len = rng.gen_range(lo..=hi);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab_size as u32)).collect();
            if !seen.insert(tokens.clone()) {
                continue;
            }
            let mut frames = Vec::with_capacity(len * frame_dim);
            for &tok in &tokens {
                map.frame(tok, &mut frames);
            }
            out.push(Sample {
                id: SampleId {
                    language_id: spec.language_id,
                    split,
                    index: out.len() as u32,
                },
                tokens,
                frames,
                frame_dim,
            });
        }
        out
    };
    let train = make_split(Split::Train, spec.n_train);
    let dev = make_split(Split::Dev, spec.n_dev);
    let test = make_split(Split::Test, spec.n_test);
    Ok(TaskDataset {
        language_id: spec.language_id,
        vocab_size,
        frame_dim,
        train,
        dev,
        test,
    })
}

/// An ordered view over training samples with per-language tallies.
#[derive(Debug, Clone)]
pub struct ReplayDataset<'a> {
    samples: Vec<&'a Sample>,
    language_counts: BTreeMap<u32, usize>,
    by_language: BTreeMap<u32, Vec<usize>>,
}

impl<'a> ReplayDataset<'a> {
    pub fn from_samples(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let mut by_language: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_language.entry(s.language_id()).or_default().push(i);
        }
        let language_counts = by_language.iter().map(|(&l, v)| (l, v.len())).collect();
        Self {
            samples,
            language_counts,
            by_language,
        }
    }

    pub fn samples(&self) -> &[&'a Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `C_l` for every language present.
    pub fn language_counts(&self) -> &BTreeMap<u32, usize> {
        &self.language_counts
    }

    pub fn num_languages(&self) -> usize {
        self.language_counts.len()
    }

    /// Positions (into [`samples`](Self::samples)) of each language's samples.
    pub fn language_indices(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.by_language
    }
}

/// Builds `D_k+`: the current task's training split followed by every buffered sample.
pub fn merge_replay<'a>(
    current: &'a TaskDataset,
    buffer: &'a MemoryBuffer,
    num_languages: usize,
) -> Result<ReplayDataset<'a>> {
    let current_ids: HashSet<SampleId> = current.train.iter().map(|s| s.id).collect();
    for s in buffer.samples() {
        if s.language_id() as usize >= num_languages {
            return Err(Error::Validation(format!(
                "buffered sample {:?} has language id >= {num_languages}",
                s.id
            )));
        }
        if current_ids.contains(&s.id) {
            return Err(Error::Consistency(format!(
                "buffered sample {:?} is also in the current task; integrate only after the stage",
                s.id
            )));
        }
    }
    Ok(ReplayDataset::from_samples(
        current.train.iter().chain(buffer.samples()),
    ))
}
