//! Gradient episodic memory: project the update so that it has a non-negative
//! inner product with every past language's reference gradient.
//!
//! The projection `min ||g~ - g||^2 / 2  s.t.  G g~ >= 0` is solved in its dual
//! `min_v v^T (G G^T) v / 2 + (G g)^T v,  v >= 0`, with `g~ = G^T v + g`.
//! Projected coordinate descent identifies the active set; a short active-set
//! refinement then solves the reduced system exactly so that the constraints
//! hold to machine precision.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, Gradient, HeadSelector, ParameterSet};

/// Constraint and KKT tolerance.
pub const GEM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GemState {
    pub languages: Vec<u32>,
    /// One row per past language.
    pub reference_grads: Vec<Gradient>,
}

/// LBS-head gradient on up to `batch_size` buffered samples (drawn without
/// replacement) of each buffered language, in buffer order.
pub fn gem_reference_grads<R: Rng + ?Sized>(
    params: &ParameterSet,
    buffer: &MemoryBuffer,
    batch_size: usize,
    rng: &mut R,
) -> Result<GemState> {
    if buffer.is_empty() {
        return Err(Error::Usage("GEM needs a non-empty buffer".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("GEM memory batch must be >= 1".into()));
    }
    let mut state = GemState {
        languages: Vec::new(),
        reference_grads: Vec::new(),
    };
    for lang in buffer.languages() {
        let pool = buffer.language_samples(lang);
        if pool.is_empty() {
            continue;
        }
        let mut picks = rand::seq::index::sample(rng, pool.len(), batch_size.min(pool.len())).into_vec();
        picks.sort_unstable();
        let batch: Vec<_> = picks.into_iter().map(|i| &pool[i]).collect();
        let (_, g) = loss_and_grad(params, &batch, HeadSelector::Lbs)?;
        state.languages.push(lang);
        state.reference_grads.push(g);
    }
    Ok(state)
}

/// Projects `g` onto `{x : <x, g_k> >= 0 for all k}`. Returns `g` unchanged when
/// it already satisfies every constraint within `tol`.
pub fn gem_project(g: &Gradient, state: &GemState, tol: f64) -> Result<Gradient> {
    let rows = &state.reference_grads;
    if let Some(r) = rows.iter().find(|r| r.len() != g.len()) {
        return Err(Error::Usage(format!(
            "reference gradient has {} entries, gradient has {}",
            r.len(),
            g.len()
        )));
    }
    let k = rows.len();
    let p: Vec<f64> = rows.iter().map(|r| r.dot(g)).collect();
    if p.iter().all(|&x| x >= -tol) {
        return Ok(g.clone());
    }
    let q = DMatrix::from_fn(k, k, |i, j| rows[i].dot(&rows[j]));
    let p = DVector::from_vec(p);

    let v = solve_dual(&q, &p, tol)?;
    let mut out = g.clone();
    for (row, &vi) in rows.iter().zip(v.iter()) {
        if vi != 0.0 {
            out.add_scaled(row, vi);
        }
    }
    let worst = rows.iter().map(|r| r.dot(&out)).fold(f64::INFINITY, f64::min);
    if worst < -tol {
        return Err(Error::Numeric(format!(
            "GEM projection left a constraint violated by {:.3e}",
            -worst
        )));
    }
    Ok(out)
}

/// KKT residual of the dual at `v`: stationarity on the support, sign elsewhere.
fn kkt_residual(q: &DMatrix<f64>, p: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let grad = q * v + p;
    v.iter()
        .zip(grad.iter())
        .map(|(&vi, &gi)| if vi > 0.0 { gi.abs() } else { (-gi).max(0.0) })
        .fold(0.0, f64::max)
}

fn solve_dual(q: &DMatrix<f64>, p: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let k = p.len();
    let mut v = DVector::zeros(k);
    let cap = 10 * k * k;
    for _ in 0..cap {
        for i in 0..k {
            let qii = q[(i, i)];
            if qii <= 0.0 {
                continue;
            }
            let gi = q.row(i).dot(&v.transpose()) + p[i];
            v[i] = (v[i] - gi / qii).max(0.0);
        }
        if kkt_residual(q, p, &v) <= tol {
            break;
        }
    }

    // Exact solve on the identified support, adjusting it while multipliers go
    // negative or inactive constraints are violated.
    let mut support: Vec<bool> = v.iter().map(|&x| x > 0.0).collect();
    for _ in 0..=2 * k {
        let idx: Vec<usize> = (0..k).filter(|&i| support[i]).collect();
        let mut w = DVector::zeros(k);
        if !idx.is_empty() {
            let qs = DMatrix::from_fn(idx.len(), idx.len(), |a, b| q[(idx[a], idx[b])]);
            let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| -p[i]));
            let sol = qs
                .pseudo_inverse(1e-12 * q.diagonal().max().max(1.0))
                .map_err(|e| Error::Numeric(format!("GEM dual solve failed: {e}")))?
                * rhs;
            for (a, &i) in idx.iter().enumerate() {
                w[i] = sol[a];
            }
        }
        let most_negative = idx
            .iter()
            .copied()
            .filter(|&i| w[i] < 0.0)
            .min_by(|&a, &b| w[a].total_cmp(&w[b]));
        if let Some(i) = most_negative {
            support[i] = false;
            continue;
        }
        let grad = q * &w + p;
        let most_violated = (0..k)
            .filter(|&i| !support[i] && grad[i] < -tol)
            .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        match most_violated {
            Some(i) => support[i] = true,
            None => return Ok(w),
        }
    }
    if kkt_residual(q, p, &v) <= tol {
        return Ok(v);
    }
    Err(Error::Numeric(format!(
        "GEM dual did not converge within {cap} sweeps (KKT residual {:.3e})",
        kkt_residual(q, p, &v)
    )))
}
