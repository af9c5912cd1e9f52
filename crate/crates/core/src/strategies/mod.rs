//! Lifelong-learning strategies and the per-stage training loop.

mod ewc;
mod gem;
mod sequence;
mod train;

pub use ewc::{ewc_consolidate, ewc_penalty, FisherState};
pub use gem::{gem_project, gem_reference_grads, GemState, GEM_TOL};
pub use sequence::{run_sequence, run_sequence_with, ExperimentResult, SequenceState};
pub use train::{dual_step, train_stage, train_stage_observed, StageConfig, StageInputs, StageResult, StageTiming};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Current task only; the lower bound.
    FineTune,
    /// All tasks at once from a fresh model; the upper bound.
    Joint,
    ReplayRandom,
    ReplayWeighted,
    ReplayDual,
    Ewc,
    Gem,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::FineTune,
        StrategyKind::Joint,
        StrategyKind::Ewc,
        StrategyKind::Gem,
        StrategyKind::ReplayRandom,
        StrategyKind::ReplayWeighted,
        StrategyKind::ReplayDual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FineTune => "fine_tune",
            StrategyKind::Joint => "joint",
            StrategyKind::ReplayRandom => "replay_random",
            StrategyKind::ReplayWeighted => "replay_weighted",
            StrategyKind::ReplayDual => "replay_dual",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Gem => "gem",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Row position in the stage table: bounds, regularization, replay.
    pub fn table_rank(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Whether the strategy keeps a memory buffer between stages.
    pub fn uses_buffer(self) -> bool {
        matches!(
            self,
            StrategyKind::ReplayRandom | StrategyKind::ReplayWeighted | StrategyKind::ReplayDual | StrategyKind::Gem
        )
    }
}

/// Sampler feeding the LBS branch of the dual strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbsSampler {
    #[default]
    Balanced,
    /// Uniform random; only useful for equivalence checks.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::ewc_lambda")]
    pub ewc_lambda: f64,
    /// Training samples used to estimate the Fisher diagonal.
    #[serde(default = "defaults::ewc_samples")]
    pub ewc_samples: usize,
    /// Buffered samples per past language for each GEM reference gradient.
    #[serde(default = "defaults::gem_memory_batch")]
    pub gem_memory_batch: usize,
    #[serde(default)]
    pub lbs_sampler: LbsSampler,
    /// RRS batch size; defaults to the training batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rrs_batch_size: Option<usize>,
}

pub(crate) mod defaults {
    pub fn gamma() -> f64 {
        0.5
    }
    pub fn beta() -> f64 {
        1.0
    }
    pub fn ewc_lambda() -> f64 {
        100.0
    }
    pub fn ewc_samples() -> usize {
        200
    }
    pub fn gem_memory_batch() -> usize {
        32
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            gamma: defaults::gamma(),
            beta: defaults::beta(),
            ewc_lambda: defaults::ewc_lambda(),
            ewc_samples: defaults::ewc_samples(),
            gem_memory_batch: defaults::gem_memory_batch(),
            lbs_sampler: LbsSampler::Balanced,
            rrs_batch_size: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config {
                    path: format!("strategy.{name}"),
                    message: format!("must be a finite non-negative number, got {v}"),
                })
            }
        };
        nonneg("gamma", self.gamma)?;
        nonneg("beta", self.beta)?;
        nonneg("ewc_lambda", self.ewc_lambda)?;
        if self.kind == StrategyKind::ReplayDual && self.gamma == 0.0 && self.beta == 0.0 {
            return Err(Error::Config {
                path: "strategy.gamma".into(),
                message: "gamma and beta cannot both be zero".into(),
            });
        }
        for (name, v) in [
            ("ewc_samples", Some(self.ewc_samples)),
            ("gem_memory_batch", Some(self.gem_memory_batch)),
            ("rrs_batch_size", self.rrs_batch_size),
        ] {
            if v == Some(0) {
                return Err(Error::Config {
                    path: format!("strategy.{name}"),
                    message: "must be >= 1".into(),
                });
            }
        }
        Ok(())
    }
}

/// `gamma * L_lbs + beta * L_rrs`.
pub fn dual_loss(lbs: &LossBreakdown, rrs: &LossBreakdown, gamma: f64, beta: f64) -> f64 {
    gamma * lbs.total + beta * rrs.total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss(total: f64) -> LossBreakdown {
        LossBreakdown::new(total, 0.0)
    }

    #[test]
    fn dual_loss_arithmetic() {
        assert_eq!(dual_loss(&loss(2.0), &loss(1.0), 0.5, 1.0), 2.0);
        assert_eq!(dual_loss(&loss(2.0), &loss(7.0), 0.5, 0.0), 1.0);
        assert_eq!(dual_loss(&loss(2.0), &loss(1.5), 1.0, 1.0), 3.5);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(StrategyKind::parse(k.name()), Some(k));
        }
        assert_eq!(StrategyKind::parse("nope"), None);
    }

    #[test]
    fn config_validation() {
        assert!(StrategyConfig::new(StrategyKind::ReplayDual).validate().is_ok());
        let mut c = StrategyConfig::new(StrategyKind::ReplayDual);
        c.gamma = -1.0;
        assert!(c.validate().is_err());
        let mut c = StrategyConfig::new(StrategyKind::Gem);
        c.gem_memory_batch = 0;
        assert!(c.validate().is_err());
    }
}
