use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ewc_consolidate, train_stage, FisherState, StageInputs, StrategyKind};
use crate::buffer::MemoryBuffer;
use crate::data::{generate_task, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::metrics::{stage_eval, LearningCurve, McdReport};
use crate::model::{init_params, AdamState, ParameterSet};
use crate::rng;

/// The stage table row and learning curves of one strategy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub task_order: Vec<u32>,
    /// Test MCD on seen languages after each stage.
    pub stages: Vec<McdReport>,
    pub curve: LearningCurve,
}

impl ExperimentResult {
    pub fn final_stage(&self) -> Option<&McdReport> {
        self.stages.last()
    }
}

/// Everything needed to continue a sequence after a stage boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceState {
    pub next_stage: usize,
    pub params: ParameterSet,
    pub optimizer: AdamState,
    pub buffer: MemoryBuffer,
    pub fisher: Option<FisherState>,
    pub result: ExperimentResult,
    /// Dev curves of the single joint training run, replayed for later stages.
    pub joint_curves: Option<BTreeMap<u32, Vec<f64>>>,
}

impl SequenceState {
    pub fn initial(config: &ExperimentConfig) -> Self {
        let params = init_params(&config.topology, rng::derive_seed(config.seed, "model", 0));
        Self {
            next_stage: 0,
            optimizer: AdamState::new(params.len(), config.lr),
            params,
            buffer: MemoryBuffer::new(config.buffer_capacity, rng::derive_seed(config.seed, "buffer", 0)),
            fisher: None,
            result: ExperimentResult {
                strategy: config.strategy.kind,
                seed: config.seed,
                task_order: config.task_order.clone(),
                stages: Vec::new(),
                curve: LearningCurve::new(config.curve_smoothing),
            },
            joint_curves: None,
        }
    }
}

/// Generates every task and runs the whole sequence in memory.
pub fn run_sequence(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let tasks = generate_all(config)?;
    let (result, _) = run_sequence_with(config, &tasks, SequenceState::initial(config), None, &mut |_| Ok(()))?;
    Ok(result)
}

pub(crate) fn generate_all(config: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    config
        .tasks
        .iter()
        .map(|spec| generate_task(spec, config.topology.vocab_size, config.topology.frame_dim))
        .collect()
}

/// Runs stages `state.next_stage..` (stopping after `stop_after` completed
/// stages, if given), calling `on_stage` at every stage boundary.
///
/// Stage `k` trains with generator stream `("stage", k)`, so every strategy sees
/// the same batches while the buffer is empty. Joint training uses one fresh
/// model on all tasks; its stages differ only in which languages are scored.
pub fn run_sequence_with(
    config: &ExperimentConfig,
    tasks: &[TaskDataset],
    mut state: SequenceState,
    stop_after: Option<usize>,
    on_stage: &mut dyn FnMut(&SequenceState) -> Result<()>,
) -> Result<(ExperimentResult, SequenceState)> {
    config.validate()?;
    if tasks.len() != config.task_order.len()
        || tasks.iter().zip(&config.task_order).any(|(t, id)| t.language_id != *id)
    {
        return Err(Error::Usage("datasets do not match the configured task order".into()));
    }
    let stage_cfg = config.stage_config();
    let all: Vec<&TaskDataset> = tasks.iter().collect();
    let kind = config.strategy.kind;

    while state.next_stage < tasks.len() {
        if stop_after.is_some_and(|n| state.next_stage >= n) {
            break;
        }
        let k = state.next_stage;
        let current = &tasks[k];
        let seen = &all[..=k];
        log::info!("{}: stage {} (language {})", kind.name(), k + 1, current.language_id);

        let curves = if kind == StrategyKind::Joint && state.joint_curves.is_some() {
            state.joint_curves.clone().unwrap()
        } else {
            let mut rng = if kind == StrategyKind::Joint {
                rng::stream(config.seed, "joint", 0)
            } else {
                rng::stream(config.seed, "stage", k as u64)
            };
            let inputs = StageInputs {
                stage: k,
                current,
                seen: if kind == StrategyKind::Joint { &all } else { seen },
                joint_tasks: &all,
                buffer: &state.buffer,
                fisher: state.fisher.as_ref(),
            };
            let opt = AdamState::new(state.params.len(), config.lr);
            let out = train_stage(&config.strategy, state.params.clone(), opt, &stage_cfg, &inputs, &mut rng)?;
            log::info!("stage {} trained in {:.2}s ({} steps)", k + 1, out.timing.seconds, out.timing.steps);
            state.params = out.final_params;
            state.optimizer = out.optimizer;
            if kind == StrategyKind::Joint {
                state.joint_curves = Some(out.dev_curves.clone());
            }
            out.dev_curves
        };

        let report = stage_eval(&state.params, seen, Split::Test)?;
        log::info!("stage {} test MCD avg {:.4}", k + 1, report.average);
        state.result.stages.push(report);
        for (lang, series) in &curves {
            for (e, v) in series.iter().enumerate() {
                state.result.curve.push(*lang, k * config.epochs_per_stage + e + 1, *v);
            }
        }

        if kind.uses_buffer() {
            state.buffer.integrate_task(current)?;
        }
        if kind == StrategyKind::Ewc {
            let mut rng = rng::stream(config.seed, "ewc", k as u64);
            state.fisher = Some(ewc_consolidate(
                &state.params,
                current,
                config.strategy.ewc_samples,
                &mut rng,
                state.fisher.as_ref(),
            )?);
        }
        state.next_stage = k + 1;
        on_stage(&state)?;
    }
    Ok((state.result.clone(), state))
}
