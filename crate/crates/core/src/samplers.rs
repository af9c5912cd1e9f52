//! Batch construction over a [`ReplayDataset`]: uniform random, inverse-frequency
//! weighted, language-balanced, and the dual (balanced + random) pair.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ReplayDataset, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    Random,
    Weighted,
    Lbs,
    Rrs,
}

/// A sampled mini-batch. Never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a> {
    samples: Vec<&'a Sample>,
    provenance: Provenance,
    histogram: BTreeMap<u32, usize>,
}

impl<'a> Batch<'a> {
    pub fn new(samples: Vec<&'a Sample>, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("a batch needs at least one sample".into()));
        }
        let mut histogram = BTreeMap::new();
        for s in &samples {
            *histogram.entry(s.language_id()).or_insert(0) += 1;
        }
        Ok(Self {
            samples,
            provenance,
            histogram,
        })
    }

    pub fn samples(&self) -> &[&'a Sample] {
        &self.samples
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn histogram(&self) -> &BTreeMap<u32, usize> {
        &self.histogram
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Re-tags the batch; the dual trainer uses this when the LBS branch is fed
    /// by the random sampler.
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// Per-sample weights `|D+| / C_l`, aligned with the dataset order. Left
/// unnormalized; only ratios matter for categorical sampling.
#[derive(Debug, Clone)]
pub struct SampleWeightTable {
    weights: Vec<f64>,
    language_counts: BTreeMap<u32, usize>,
    index: WeightedIndex<f64>,
}

impl SampleWeightTable {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn language_counts(&self) -> &BTreeMap<u32, usize> {
        &self.language_counts
    }

    /// Sum of weights per language; equal to `|D+|` for every language.
    pub fn language_totals(&self, ds: &ReplayDataset<'_>) -> BTreeMap<u32, f64> {
        let mut totals = BTreeMap::new();
        for (s, w) in ds.samples().iter().zip(&self.weights) {
            *totals.entry(s.language_id()).or_insert(0.0) += w;
        }
        totals
    }
}

pub fn build_weight_table(ds: &ReplayDataset<'_>) -> Result<SampleWeightTable> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot weight an empty dataset".into()));
    }
    let total = ds.len() as f64;
    let counts = ds.language_counts();
    let weights = ds
        .samples()
        .iter()
        .map(|s| match counts.get(&s.language_id()) {
            Some(&c) if c > 0 => Ok(total / c as f64),
            _ => Err(Error::Consistency(format!(
                "language {} has no count in the replay dataset",
                s.language_id()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let index = WeightedIndex::new(&weights)
        .map_err(|e| Error::Consistency(format!("invalid sampling weights: {e}")))?;
    Ok(SampleWeightTable {
        weights,
        language_counts: counts.clone(),
        index,
    })
}

fn check_size(ds: &ReplayDataset<'_>, batch_size: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot sample from an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be >= 1".into()));
    }
    Ok(())
}

/// Uniform with replacement over the whole dataset.
pub fn draw_random<'a, R: Rng + ?Sized>(ds: &ReplayDataset<'a>, batch_size: usize, rng: &mut R) -> Result<Batch<'a>> {
    check_size(ds, batch_size)?;
    let all = ds.samples();
    let picks = (0..batch_size).map(|_| all[rng.gen_range(0..all.len())]).collect();
    Batch::new(picks, Provenance::Random)
}

/// Categorical with replacement, proportional to the table's weights.
pub fn draw_weighted<'a, R: Rng + ?Sized>(
    table: &SampleWeightTable,
    ds: &ReplayDataset<'a>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch<'a>> {
    check_size(ds, batch_size)?;
    if table.weights.len() != ds.len() || &table.language_counts != ds.language_counts() {
        return Err(Error::Usage("weight table was built for a different dataset".into()));
    }
    let all = ds.samples();
    let picks = (0..batch_size).map(|_| all[table.index.sample(rng)]).collect();
    Batch::new(picks, Provenance::Weighted)
}

/// `batch_size / K` samples per language, with the remainder going one each to
/// randomly chosen languages; uniform with replacement inside each language.
pub fn draw_balanced<'a, R: Rng + ?Sized>(ds: &ReplayDataset<'a>, batch_size: usize, rng: &mut R) -> Result<Batch<'a>> {
    check_size(ds, batch_size)?;
    let k = ds.num_languages();
    if batch_size < k {
        return Err(Error::Usage(format!(
            "balanced batch of {batch_size} cannot cover {k} languages"
        )));
    }
    let base = batch_size / k;
    let mut quota = vec![base; k];
    for i in rand::seq::index::sample(rng, k, batch_size % k) {
        quota[i] += 1;
    }
    let all = ds.samples();
    let mut picks = Vec::with_capacity(batch_size);
    for (members, n) in ds.language_indices().values().zip(quota) {
        for _ in 0..n {
            picks.push(all[members[rng.gen_range(0..members.len())]]);
        }
    }
    Batch::new(picks, Provenance::Lbs)
}

/// Balanced batch then random batch, from one generator in that order.
pub fn draw_dual<'a, R: Rng + ?Sized>(ds: &ReplayDataset<'a>, batch_size: usize, rng: &mut R) -> Result<(Batch<'a>, Batch<'a>)> {
    draw_dual_sized(ds, batch_size, batch_size, rng)
}

pub fn draw_dual_sized<'a, R: Rng + ?Sized>(
    ds: &ReplayDataset<'a>,
    lbs_size: usize,
    rrs_size: usize,
    rng: &mut R,
) -> Result<(Batch<'a>, Batch<'a>)> {
    let lbs = draw_balanced(ds, lbs_size, rng)?;
    let rrs = draw_random(ds, rrs_size, rng)?.with_provenance(Provenance::Rrs);
    Ok((lbs, rrs))
}
