//! Stage-boundary checkpoints (JSON, floats round-trip exactly).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::{byte_offset, BufferSnapshot, MemoryBuffer};
use crate::data::format::write_atomic;
use crate::error::{Error, Result};
use crate::model::{AdamState, ModelTopology, ParameterSet};
use crate::strategies::{ExperimentResult, FisherState, SequenceState};

const FORMAT: &str = "lltts-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Number of completed stages.
    pub stage_index: usize,
    pub config_hash: String,
    pub params: Vec<f64>,
    pub optimizer: AdamState,
    /// Includes the buffer's generator state. Every other stream is re-derived
    /// from the seed and stage index.
    pub buffer: BufferSnapshot,
    pub fisher: Option<FisherState>,
    pub result: ExperimentResult,
    pub joint_curves: Option<BTreeMap<u32, Vec<f64>>>,
}

impl Checkpoint {
    pub fn from_state(state: &SequenceState, config_hash: &str) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            stage_index: state.next_stage,
            config_hash: config_hash.into(),
            params: state.params.values.clone(),
            optimizer: state.optimizer.clone(),
            buffer: state.buffer.snapshot(),
            fisher: state.fisher.clone(),
            result: state.result.clone(),
            joint_curves: state.joint_curves.clone(),
        }
    }

    pub fn into_state(self, topology: &ModelTopology) -> Result<SequenceState> {
        Ok(SequenceState {
            next_stage: self.stage_index,
            params: ParameterSet::from_values(topology, self.params)?,
            optimizer: self.optimizer,
            buffer: MemoryBuffer::restore(self.buffer)?,
            fisher: self.fisher,
            result: self.result,
            joint_curves: self.joint_curves,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            offset: byte_offset(bytes, e.line(), e.column()),
            message: e.to_string(),
        })?;
        if cp.format != FORMAT {
            return Err(Error::Format {
                offset: 0,
                message: format!("not a checkpoint (format {:?})", cp.format),
            });
        }
        if cp.version != VERSION {
            return Err(Error::Version {
                found: cp.version,
                expected: VERSION,
            });
        }
        Ok(cp)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &cp.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint for resuming, refusing one written for a different
/// config unless `allow_mismatch` is set.
pub fn load_for_resume(path: &Path, expected_hash: &str, allow_mismatch: bool) -> Result<Checkpoint> {
    let cp = load_checkpoint(path)?;
    if cp.config_hash != expected_hash {
        if !allow_mismatch {
            return Err(Error::ConfigHashMismatch {
                path: path.to_owned(),
                found: cp.config_hash,
                expected: expected_hash.into(),
            });
        }
        log::warn!("resuming from {} despite config hash mismatch", path.display());
    }
    Ok(cp)
}
