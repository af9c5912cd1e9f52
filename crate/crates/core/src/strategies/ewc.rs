//! Elastic weight consolidation with a running-sum diagonal Fisher and a single
//! most-recent anchor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{loss_and_grad_with, Gradient, HeadSelector, ParameterSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherState {
    pub fisher_diag: Vec<f64>,
    /// Parameter values at the end of the most recent consolidated task.
    pub anchor: Vec<f64>,
    pub tasks: usize,
}

/// Estimates the Fisher diagonal on `n_samples` training samples (without
/// replacement, capped at the split size) as the mean squared single-sample LBS
/// gradient, adds it to `prior`, and re-anchors at `params`.
pub fn ewc_consolidate<R: Rng + ?Sized>(
    params: &ParameterSet,
    ds: &TaskDataset,
    n_samples: usize,
    rng: &mut R,
    prior: Option<&FisherState>,
) -> Result<FisherState> {
    if n_samples == 0 {
        return Err(Error::Usage("EWC needs at least one sample".into()));
    }
    if ds.train.is_empty() {
        return Err(Error::Usage(format!("language {} has no training samples", ds.language_id)));
    }
    let n = n_samples.min(ds.train.len());
    let mut picks = rand::seq::index::sample(rng, ds.train.len(), n).into_vec();
    picks.sort_unstable();
    let grads = Exec::default().map(&picks, |&i| {
        loss_and_grad_with(Exec::Sequential, params, &[&ds.train[i]], HeadSelector::Lbs).map(|(_, g)| g)
    });
    let mut diag = vec![0.0; params.len()];
    for g in grads {
        for (f, v) in diag.iter_mut().zip(g?.values) {
            *f += v * v;
        }
    }
    let scale = 1.0 / n as f64;
    diag.iter_mut().for_each(|f| *f *= scale);
    let tasks = if let Some(p) = prior {
        if p.fisher_diag.len() != diag.len() {
            return Err(Error::Usage("prior Fisher has a different parameter count".into()));
        }
        for (f, q) in diag.iter_mut().zip(&p.fisher_diag) {
            *f += q;
        }
        p.tasks + 1
    } else {
        1
    };
    Ok(FisherState {
        fisher_diag: diag,
        anchor: params.values.clone(),
        tasks,
    })
}

/// `(lambda / 2) * sum_i F_i (theta_i - anchor_i)^2` and its gradient `lambda * F * (theta - anchor)`.
pub fn ewc_penalty(params: &ParameterSet, state: &FisherState, lambda: f64) -> Result<(f64, Gradient)> {
    if state.fisher_diag.len() != params.len() || state.anchor.len() != params.len() {
        return Err(Error::Usage("Fisher state does not match the parameter count".into()));
    }
    let mut value = 0.0;
    let mut grad = Gradient::zeros(params.len());
    for (((g, &theta), &anchor), &f) in grad
        .values
        .iter_mut()
        .zip(&params.values)
        .zip(&state.anchor)
        .zip(&state.fisher_diag)
    {
        let d = theta - anchor;
        value += f * d * d;
        *g = lambda * f * d;
    }
    Ok((0.5 * lambda * value, grad))
}
