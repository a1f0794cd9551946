//! Error metrics over time.
//!
//! With `s_k` the squared error norm at step `k` (averaged over runs when
//! several are available): `RMSE_k = √(s_k / n)` and
//! `AMSE_k = √(Σ_{i≤k} s_i / (n·k))`.

use alloc::vec::Vec;

use crate::matkit::Vector;

pub fn squared_norm(e: &Vector) -> f64 {
    e.iter().map(|v| v * v).sum()
}

pub fn rmse_from_squared(sq: &[f64], n: usize) -> Vec<f64> {
    sq.iter().map(|s| crate::math::sqrt(s / n as f64)).collect()
}

pub fn amse_from_squared(sq: &[f64], n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    sq.iter()
        .enumerate()
        .map(|(i, s)| {
            acc += s;
            crate::math::sqrt(acc / (n as f64 * (i + 1) as f64))
        })
        .collect()
}

/// RMSE series of one error sequence `e_1..e_K`.
pub fn rmse_series(errors: &[Vector], n: usize) -> Vec<f64> {
    let sq: Vec<f64> = errors.iter().map(squared_norm).collect();
    rmse_from_squared(&sq, n)
}

/// AMSE series of one error sequence `e_1..e_K`.
pub fn amse_series(errors: &[Vector], n: usize) -> Vec<f64> {
    let sq: Vec<f64> = errors.iter().map(squared_norm).collect();
    amse_from_squared(&sq, n)
}

/// Per-step mean of squared error norms over runs of equal length.
pub fn mean_squared(runs: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let mut out = alloc::vec![0.0; first.len()];
    for r in runs {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let count = runs.len() as f64;
    out.iter_mut().for_each(|o| *o /= count);
    out
}
