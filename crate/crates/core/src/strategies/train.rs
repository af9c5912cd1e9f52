use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{dual_loss, ewc_penalty, gem_project, gem_reference_grads, FisherState, LbsSampler, StrategyConfig, StrategyKind, GEM_TOL};
use crate::buffer::MemoryBuffer;
use crate::data::{merge_replay, ReplayDataset, Split, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::stage_eval;
use crate::model::{adam_step, loss_and_grad, AdamState, Gradient, HeadSelector, LossBreakdown, ParameterSet};
use crate::rng::Rng;
use crate::samplers::{build_weight_table, draw_balanced, draw_dual_sized, draw_random, draw_weighted};

/// Optimization settings shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate halves from epoch `ceil(fraction * epochs)` (0-based) onwards.
    pub lr_decay_epoch_fraction: f64,
    pub num_languages: usize,
    /// Record dev MCD on every seen language after each epoch.
    pub track_dev: bool,
}

impl StageConfig {
    pub fn decay_epoch(&self) -> usize {
        (self.lr_decay_epoch_fraction * self.epochs as f64).ceil() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * 0.5
        } else {
            self.lr
        }
    }
}

/// Everything a stage reads besides the parameters and optimizer.
pub struct StageInputs<'a> {
    pub stage: usize,
    pub current: &'a TaskDataset,
    /// Tasks evaluated on the dev split each epoch, in task order.
    pub seen: &'a [&'a TaskDataset],
    /// Training pool for [`StrategyKind::Joint`].
    pub joint_tasks: &'a [&'a TaskDataset],
    pub buffer: &'a MemoryBuffer,
    pub fisher: Option<&'a FisherState>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seconds: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub final_params: ParameterSet,
    pub optimizer: AdamState,
    /// Per seen language, dev MCD after each epoch (empty unless tracked).
    pub dev_curves: BTreeMap<u32, Vec<f64>>,
    pub timing: StageTiming,
}

pub fn train_stage(
    strategy: &StrategyConfig,
    params: ParameterSet,
    opt: AdamState,
    cfg: &StageConfig,
    inputs: &StageInputs<'_>,
    rng: &mut Rng,
) -> Result<StageResult> {
    train_stage_observed(strategy, params, opt, cfg, inputs, rng, &mut |_, _| {})
}

enum Plan {
    Plain,
    Weighted,
    Dual,
}

/// [`train_stage`] with a callback after every optimizer step
/// (`global step index, parameters`).
#[allow(clippy::too_many_arguments)]
pub fn train_stage_observed(
    strategy: &StrategyConfig,
    mut params: ParameterSet,
    mut opt: AdamState,
    cfg: &StageConfig,
    inputs: &StageInputs<'_>,
    rng: &mut Rng,
    observe: &mut dyn FnMut(usize, &ParameterSet),
) -> Result<StageResult> {
    strategy.validate()?;
    opt.validate()?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Usage("epochs and batch size must be >= 1".into()));
    }
    let started = Instant::now();
    let kind = strategy.kind;
    let pool: ReplayDataset<'_> = match kind {
        StrategyKind::FineTune | StrategyKind::Ewc | StrategyKind::Gem => {
            ReplayDataset::from_samples(&inputs.current.train)
        }
        StrategyKind::Joint => ReplayDataset::from_samples(inputs.joint_tasks.iter().flat_map(|t| &t.train)),
        StrategyKind::ReplayRandom | StrategyKind::ReplayWeighted | StrategyKind::ReplayDual => {
            merge_replay(inputs.current, inputs.buffer, cfg.num_languages)?
        }
    };
    if pool.is_empty() {
        return Err(Error::Usage("stage has no training samples".into()));
    }
    // With a single language every replay variant is plain supervised training.
    let plan = match kind {
        StrategyKind::ReplayWeighted if pool.num_languages() > 1 => Plan::Weighted,
        StrategyKind::ReplayDual if pool.num_languages() > 1 => Plan::Dual,
        _ => Plan::Plain,
    };
    let table = match plan {
        Plan::Weighted => Some(build_weight_table(&pool)?),
        _ => None,
    };
    let fisher = inputs.fisher.filter(|_| kind == StrategyKind::Ewc);
    let use_gem = kind == StrategyKind::Gem && !inputs.buffer.is_empty();
    let rrs_size = strategy.rrs_batch_size.unwrap_or(cfg.batch_size);

    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let mut dev_curves: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut step_index = 0;

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        for step in 0..steps_per_epoch {
            let (loss, mut grad): (LossBreakdown, Gradient) = match plan {
                Plan::Plain => {
                    let b = draw_random(&pool, cfg.batch_size, rng)?;
                    loss_and_grad(&params, b.samples(), HeadSelector::Lbs)?
                }
                Plan::Weighted => {
                    let b = draw_weighted(table.as_ref().unwrap(), &pool, cfg.batch_size, rng)?;
                    loss_and_grad(&params, b.samples(), HeadSelector::Lbs)?
                }
                Plan::Dual => dual_step(strategy, &params, &pool, cfg.batch_size, rrs_size, rng)?,
            };
            if !loss.is_finite() {
                return Err(Error::StageAborted {
                    stage: inputs.stage,
                    epoch,
                    step,
                    pre: loss.pre_postnet_mse,
                    post: loss.post_postnet_mse,
                    total: loss.total,
                });
            }
            if let Some(f) = fisher {
                let (_, pg) = ewc_penalty(&params, f, strategy.ewc_lambda)?;
                grad.add_scaled(&pg, 1.0);
            }
            if use_gem {
                let refs = gem_reference_grads(&params, inputs.buffer, strategy.gem_memory_batch, rng)?;
                grad = gem_project(&grad, &refs, GEM_TOL)?;
            }
            adam_step(&mut opt, &mut params, &grad).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("stage {} epoch {epoch} step {step}: {m}", inputs.stage)),
                other => other,
            })?;
            observe(step_index, &params);
            step_index += 1;
        }
        if cfg.track_dev {
            let report = stage_eval(&params, inputs.seen, Split::Dev)?;
            for (lang, v) in report.per_language {
                dev_curves.entry(lang).or_default().push(v);
            }
        }
        log::debug!("stage {} epoch {epoch} lr {}", inputs.stage, opt.lr);
    }
    Ok(StageResult {
        final_params: params,
        optimizer: opt,
        dev_curves,
        timing: StageTiming {
            seconds: started.elapsed().as_secs_f64(),
            steps: step_index,
        },
    })
}

/// One dual-sampler step: draws the LBS and RRS batches and returns the
/// combined gradient `gamma * grad(L_lbs) + beta * grad(L_rrs)`. A branch with
/// zero weight is skipped entirely, including its batch draw.
pub fn dual_step(
    strategy: &StrategyConfig,
    params: &ParameterSet,
    pool: &ReplayDataset<'_>,
    lbs_size: usize,
    rrs_size: usize,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Gradient)> {
    let (gamma, beta) = (strategy.gamma, strategy.beta);
    let (lbs, rrs) = match (strategy.lbs_sampler, gamma > 0.0, beta > 0.0) {
        (LbsSampler::Balanced, true, true) => {
            let (a, b) = draw_dual_sized(pool, lbs_size, rrs_size, rng)?;
            (Some(a), Some(b))
        }
        (sampler, use_lbs, use_rrs) => {
            let a = if use_lbs {
                Some(match sampler {
                    LbsSampler::Balanced => draw_balanced(pool, lbs_size, rng)?,
                    LbsSampler::Random => draw_random(pool, lbs_size, rng)?,
                })
            } else {
                None
            };
            let b = if use_rrs { Some(draw_random(pool, rrs_size, rng)?) } else { None };
            (a, b)
        }
    };
    let mut grad = Gradient::zeros(params.len());
    let mut l_lbs = LossBreakdown::default();
    let mut l_rrs = LossBreakdown::default();
    if let Some(b) = lbs {
        let (l, g) = loss_and_grad(params, b.samples(), HeadSelector::Lbs)?;
        grad = g.scaled(gamma);
        l_lbs = l;
    }
    if let Some(b) = rrs {
        let (l, g) = loss_and_grad(params, b.samples(), HeadSelector::Rrs)?;
        grad.add_scaled(&g, beta);
        l_rrs = l;
    }
    let total = dual_loss(&l_lbs, &l_rrs, gamma, beta);
    Ok((
        LossBreakdown {
            pre_postnet_mse: gamma * l_lbs.pre_postnet_mse + beta * l_rrs.pre_postnet_mse,
            post_postnet_mse: gamma * l_lbs.post_postnet_mse + beta * l_rrs.post_postnet_mse,
            total,
        },
        grad,
    ))
}
