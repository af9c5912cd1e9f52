//! Language-balanced episodic memory.
//!
//! After each task the buffer re-balances: with `K` languages stored, each gets
//! `capacity / K` slots and the `capacity % K` leftover slots go one each to the
//! earliest-integrated languages. Existing languages are shrunk by uniform
//! random eviction; the new language is filled with uniformly random training
//! samples.

use serde::{Deserialize, Serialize};

use crate::data::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot {
    language_id: u32,
    samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    rng_seed: u64,
    slots: Vec<Slot>,
    rng: Rng,
}

/// Serializable image of a [`MemoryBuffer`], including its generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    capacity: usize,
    rng_seed: u64,
    slots: Vec<Slot>,
    rng: Rng,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, rng_seed: u64) -> Self {
        Self {
            capacity,
            rng_seed,
            slots: Vec::new(),
            rng: rng::stream(rng_seed, "buffer", 0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Languages in integration order.
    pub fn languages(&self) -> Vec<u32> {
        self.slots.iter().map(|s| s.language_id).collect()
    }

    /// `(language, count)` in integration order.
    pub fn counts(&self) -> Vec<(u32, usize)> {
        self.slots
            .iter()
            .map(|s| (s.language_id, s.samples.len()))
            .collect()
    }

    pub fn language_samples(&self, language_id: u32) -> &[Sample] {
        self.slots
            .iter()
            .find(|s| s.language_id == language_id)
            .map(|s| s.samples.as_slice())
            .unwrap_or(&[])
    }

    /// All buffered samples, grouped by language in integration order.
    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.slots.iter().flat_map(|s| s.samples.iter())
    }

    fn quota(&self, position: usize, languages: usize) -> usize {
        self.capacity / languages + usize::from(position < self.capacity % languages)
    }

    /// Adds a finished task's training samples and re-balances.
    pub fn integrate_task(&mut self, ds: &TaskDataset) -> Result<()> {
        if self.slots.iter().any(|s| s.language_id == ds.language_id) {
            return Err(Error::Usage(format!(
                "language {} is already in the buffer",
                ds.language_id
            )));
        }
        let languages = self.slots.len() + 1;
        for position in 0..self.slots.len() {
            let quota = self.quota(position, languages);
            let slot = &mut self.slots[position];
            if slot.samples.len() > quota {
                let mut keep = rand::seq::index::sample(&mut self.rng, slot.samples.len(), quota).into_vec();
                keep.sort_unstable();
                let old = std::mem::take(&mut slot.samples);
                let mut old: Vec<Option<Sample>> = old.into_iter().map(Some).collect();
                slot.samples = keep.into_iter().map(|i| old[i].take().unwrap()).collect();
            }
        }
        let quota = self.quota(self.slots.len(), languages).min(ds.train.len());
        let mut pick = rand::seq::index::sample(&mut self.rng, ds.train.len(), quota).into_vec();
        pick.sort_unstable();
        self.slots.push(Slot {
            language_id: ds.language_id,
            samples: pick.into_iter().map(|i| ds.train[i].clone()).collect(),
        });
        log::debug!("buffer after language {}: {:?}", ds.language_id, self.counts());
        Ok(())
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            rng_seed: self.rng_seed,
            slots: self.slots.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn restore(record: BufferSnapshot) -> Result<Self> {
        let total: usize = record.slots.iter().map(|s| s.samples.len()).sum();
        if total > record.capacity {
            return Err(Error::Format {
                offset: 0,
                message: format!("buffer record holds {total} samples over capacity {}", record.capacity),
            });
        }
        for slot in &record.slots {
            if slot.samples.iter().any(|s| s.language_id() != slot.language_id) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("buffer slot {} holds foreign samples", slot.language_id),
                });
            }
        }
        Ok(Self {
            capacity: record.capacity,
            rng_seed: record.rng_seed,
            slots: record.slots,
            rng: record.rng,
        })
    }
}

impl BufferSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("buffer snapshot serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Format {
            offset: byte_offset(bytes, e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

pub(crate) fn byte_offset(bytes: &[u8], line: usize, column: usize) -> u64 {
    let line_start: usize = bytes
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)) as u64
}
