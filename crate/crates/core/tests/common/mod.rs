#![allow(dead_code)]

use lltts_core::data::{Sample, SampleId, Split};
use lltts_core::model::{init_params, ModelTopology, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_topology() -> ModelTopology {
    ModelTopology {
        vocab_size: 5,
        embed_dim: 3,
        encoder_hidden: 4,
        trunk_dim: 3,
        frame_dim: 2,
        postnet_hidden: 3,
        num_languages: 2,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Initialized parameters with every bias also randomized, so no term is trivially zero.
pub fn random_params(topology: &ModelTopology, seed: u64) -> ParameterSet {
    let mut p = init_params(topology, seed);
    let mut r = rng(seed ^ 0x9e37);
    for v in &mut p.values {
        *v += r.gen_range(-0.3..0.3);
    }
    p
}

pub fn random_sample(topology: &ModelTopology, r: &mut impl Rng, len: usize, index: u32) -> Sample {
    let language_id = r.gen_range(0..topology.num_languages as u32);
    Sample {
        id: SampleId {
            language_id,
            split: Split::Train,
            index,
        },
        tokens: (0..len).map(|_| r.gen_range(0..topology.vocab_size as u32)).collect(),
        frames: (0..len * topology.frame_dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        frame_dim: topology.frame_dim,
    }
}

pub fn sample_with(language_id: u32, index: u32, tokens: Vec<u32>, frames: Vec<f64>, frame_dim: usize) -> Sample {
    Sample {
        id: SampleId {
            language_id,
            split: Split::Train,
            index,
        },
        tokens,
        frames,
        frame_dim,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Nearest point to `g` in `{x : <x, r> >= 0 for every row r}`, by trying every
/// active set and keeping the closest candidate that satisfies the KKT conditions.
pub fn projection_by_active_sets(g: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.len();
    let norm = rows.iter().map(|r| dot(r, r).sqrt()).fold(1.0f64, f64::max) * dot(g, g).sqrt().max(1.0);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let v = if idx.is_empty() {
            Vec::new()
        } else {
            let a = idx.iter().map(|&i| idx.iter().map(|&j| dot(&rows[i], &rows[j])).collect()).collect();
            let b = idx.iter().map(|&i| -dot(&rows[i], g)).collect();
            match solve_small(a, b) {
                Some(v) => v,
                None => continue,
            }
        };
        if v.iter().any(|&x| x < -1e-12) {
            continue;
        }
        let mut x = g.to_vec();
        for (&i, &vi) in idx.iter().zip(&v) {
            for (xj, rj) in x.iter_mut().zip(&rows[i]) {
                *xj += vi * rj;
            }
        }
        if rows.iter().any(|r| dot(&x, r) < -1e-9 * norm) {
            continue;
        }
        let dist: f64 = x.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, x));
        }
    }
    best.expect("the feasible cone always contains zero").1
}
