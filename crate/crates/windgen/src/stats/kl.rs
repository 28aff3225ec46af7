//! Symmetrized Kullback-Leibler divergence estimated from samples.
//!
//! Uses the k-nearest-neighbor density-ratio estimator: for each point of P,
//! compare the distance to its k-th neighbor within P (self excluded) against
//! the distance to its k-th neighbor in Q,
//!
//! `KL(P‖Q) ≈ (m/N) Σᵢ ln(ν_k(i)/ρ_k(i)) + ln(M/(N−1))`,
//!
//! then add the reverse direction. Distances are floored at 1e-12 so
//! duplicate points act as ties instead of dividing by zero, and the final
//! sum is clamped at 0.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Distance floor standing in for tie-breaking jitter.
const DIST_FLOOR: f64 = 1e-12;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from each point of `queries` to its k-th nearest neighbor in
/// `targets`, excluding the query's own index when `exclude_self` is set
/// (valid only when queries and targets are the same set).
fn knn_distances(queries: &[Vec<f64>], targets: &[Vec<f64>], k: usize, exclude_self: bool) -> Vec<f64> {
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            // Track the k smallest squared distances in a tiny insertion heap.
            let mut best = vec![f64::INFINITY; k];
            for (ti, t) in targets.iter().enumerate() {
                if exclude_self && ti == qi {
                    continue;
                }
                let d = sq_dist(q, t);
                if d < best[k - 1] {
                    let mut j = k - 1;
                    while j > 0 && best[j - 1] > d {
                        best[j] = best[j - 1];
                        j -= 1;
                    }
                    best[j] = d;
                }
            }
            best[k - 1].sqrt().max(DIST_FLOOR)
        })
        .collect()
}

fn kl_one_direction(p: &[Vec<f64>], q: &[Vec<f64>], k: usize) -> f64 {
    let n = p.len();
    let m_samples = q.len();
    let dim = p[0].len() as f64;
    let rho = knn_distances(p, p, k, true);
    let nu = knn_distances(p, q, k, false);
    let sum: f64 = rho.iter().zip(&nu).map(|(&r, &v)| (v / r).ln()).sum();
    (dim / n as f64) * sum + (m_samples as f64 / (n as f64 - 1.0)).ln()
}

/// Symmetrized KL divergence `KL(P‖Q) + KL(Q‖P)`, clamped at 0.
pub fn symmetrized_kl(p: &[Vec<f64>], q: &[Vec<f64>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidInput("neighbor count k must be >= 1".into()));
    }
    if p.len() <= k || q.len() <= k {
        return Err(Error::TooFewSamples {
            context: "symmetrized_kl",
            needed: k,
            got: p.len().min(q.len()),
        });
    }
    let dim = p[0].len();
    if dim == 0 {
        return Err(Error::InvalidInput("samples must have at least one dimension".into()));
    }
    if p.iter().chain(q).any(|r| r.len() != dim) {
        return Err(Error::DimMismatch { context: "symmetrized_kl", expected: dim, actual: 0 });
    }
    if p.iter().chain(q).flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("symmetrized_kl input".into()));
    }
    let total = kl_one_direction(p, q, k) + kl_one_direction(q, p, k);
    Ok(total.max(0.0))
}
