//! EM fitting of full-covariance Gaussian mixtures with BIC model selection.

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Diagonal regularization added to every covariance update.
pub const COVARIANCE_REG: f64 = 1e-6;

/// Below this weight a component counts as collapsed and is re-seeded.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;

/// A Gaussian mixture with full covariance matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    /// Component weights, a simplex vector.
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl Gmm {
    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, DVector::len)
    }

    /// Check the mixture invariants: weights on the simplex, covariances
    /// symmetric and positive definite.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidInput(format!("weights not a simplex (sum {sum})")));
        }
        for (k, cov) in self.covariances.iter().enumerate() {
            for i in 0..cov.nrows() {
                for j in 0..i {
                    if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 {
                        return Err(Error::InvalidInput(format!(
                            "covariance {k} not symmetric at ({i},{j})"
                        )));
                    }
                }
            }
            if cholesky_lower(cov).is_none() {
                return Err(Error::InvalidInput(format!(
                    "covariance {k} not positive definite"
                )));
            }
        }
        Ok(())
    }
}

/// Lower Cholesky factor, or `None` if the matrix is not positive definite.
pub(crate) fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

/// Solve `L z = d` in place for lower-triangular `L`.
pub(crate) fn forward_solve(l: &DMatrix<f64>, d: &mut [f64]) {
    let n = d.len();
    for i in 0..n {
        let mut acc = d[i];
        for j in 0..i {
            acc -= l[(i, j)] * d[j];
        }
        d[i] = acc / l[(i, i)];
    }
}

/// Per-component quantities reused across E-step evaluations.
pub(crate) struct ComponentDensity {
    pub l: DMatrix<f64>,
    /// −½(C·ln 2π + ln det Σ), the Gaussian normalizer.
    pub log_norm: f64,
    pub mean: DVector<f64>,
    pub log_weight: f64,
}

pub(crate) fn component_densities(gmm: &Gmm) -> Result<Vec<ComponentDensity>> {
    let dim = gmm.dim() as f64;
    gmm.weights
        .iter()
        .zip(&gmm.means)
        .zip(&gmm.covariances)
        .map(|((&w, mean), cov)| {
            let l = cholesky_lower(cov).ok_or_else(|| {
                Error::Fit("covariance lost positive definiteness".to_string())
            })?;
            let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            Ok(ComponentDensity {
                log_norm: -0.5 * (dim * (2.0 * std::f64::consts::PI).ln() + log_det),
                l,
                mean: mean.clone(),
                log_weight: if w > 0.0 { w.ln() } else { f64::NEG_INFINITY },
            })
        })
        .collect()
}

/// Log of one component's weighted density at a point.
pub(crate) fn component_log_density(
    comp: &ComponentDensity,
    x: &[f64],
    scratch: &mut Vec<f64>,
) -> f64 {
    scratch.clear();
    scratch.extend(x.iter().zip(comp.mean.iter()).map(|(&a, &b)| a - b));
    forward_solve(&comp.l, scratch);
    let maha: f64 = scratch.iter().map(|z| z * z).sum();
    comp.log_weight + comp.log_norm - 0.5 * maha
}

/// Result of an EM fit.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm,
    /// Total log-likelihood after each iteration of the winning restart.
    pub log_likelihood_trace: Vec<f64>,
}

/// EM options; `restarts` independent runs keep the best likelihood.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 200, restarts: 3 }
    }
}

/// Fit a k-component mixture by EM with k-means++ seeding.
pub fn em_fit(rows: &[Vec<f64>], k: usize, seed: u64, opts: &EmOptions) -> Result<EmFit> {
    let n = rows.len();
    if k == 0 {
        return Err(Error::InvalidInput("component count must be >= 1".into()));
    }
    if n <= k {
        return Err(Error::TooFewSamples { context: "em_fit", needed: k, got: n });
    }
    if opts.tol <= 0.0 {
        return Err(Error::InvalidInput("tol must be positive".into()));
    }

    let mut best: Option<EmFit> = None;
    for restart in 0..opts.restarts.max(1) {
        let fit = em_fit_single(rows, k, seed, restart as u64, opts)?;
        let ll = *fit.log_likelihood_trace.last().unwrap();
        if best
            .as_ref()
            .is_none_or(|b| ll > *b.log_likelihood_trace.last().unwrap())
        {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

fn em_fit_single(
    rows: &[Vec<f64>],
    k: usize,
    seed: u64,
    restart: u64,
    opts: &EmOptions,
) -> Result<EmFit> {
    let n = rows.len();
    let d = rows[0].len();
    let mut rng = rng_for(seed, restart);

    // k-means++ seeding for the means.
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    means.push(DVector::from_column_slice(&rows[first]));
    let mut dist2: Vec<f64> = rows
        .iter()
        .map(|r| sq_dist(r, means[0].as_slice()))
        .collect();
    while means.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut pick: f64 = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                if pick < d2 {
                    idx = i;
                    break;
                }
                pick -= d2;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        means.push(DVector::from_column_slice(&rows[next]));
        for (i, r) in rows.iter().enumerate() {
            dist2[i] = dist2[i].min(sq_dist(r, means.last().unwrap().as_slice()));
        }
    }

    // Start every component at the global covariance.
    let global_cov = population_covariance(rows);
    let mut gmm = Gmm {
        weights: vec![1.0 / k as f64; k],
        means,
        covariances: vec![regularized(&global_cov); k],
    };

    let mut trace = Vec::new();
    let mut resp = vec![vec![0.0; k]; n];
    let mut point_ll = vec![0.0; n];
    let mut reseeded_last_iter = false;

    for _iter in 0..opts.max_iter {
        // E-step.
        let comps = component_densities(&gmm)?;
        let mut scratch = Vec::with_capacity(d);
        let mut total_ll = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let r = &mut resp[i];
            let mut max = f64::NEG_INFINITY;
            for (c, comp) in comps.iter().enumerate() {
                r[c] = component_log_density(comp, row, &mut scratch);
                max = max.max(r[c]);
            }
            let sum: f64 = r.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            point_ll[i] = lse;
            total_ll += lse;
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        if !total_ll.is_finite() {
            return Err(Error::Fit("EM log-likelihood became non-finite".into()));
        }
        // Clean EM steps never decrease the likelihood; a drop is only
        // legitimate right after a collapse re-seed.
        if let Some(&prev) = trace.last() {
            if total_ll < prev - 1e-9 && !reseeded_last_iter {
                return Err(Error::Fit(format!(
                    "EM log-likelihood decreased from {prev} to {total_ll}"
                )));
            }
        }
        let converged =
            trace.last().is_some_and(|&prev: &f64| total_ll - prev < opts.tol);
        trace.push(total_ll);
        if converged {
            break;
        }

        // M-step.
        reseeded_last_iter = false;
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            if nk / n as f64 >= COLLAPSE_WEIGHT {
                gmm.weights[c] = nk / n as f64;
                let mut mean = DVector::zeros(d);
                for (r, row) in resp.iter().zip(rows) {
                    for j in 0..d {
                        mean[j] += r[c] * row[j];
                    }
                }
                mean /= nk;
                let mut cov = DMatrix::zeros(d, d);
                for (r, row) in resp.iter().zip(rows) {
                    let w = r[c];
                    if w > 0.0 {
                        for a in 0..d {
                            let da = row[a] - mean[a];
                            for b in a..d {
                                cov[(a, b)] += w * da * (row[b] - mean[b]);
                            }
                        }
                    }
                }
                for a in 0..d {
                    for b in a..d {
                        let val = cov[(a, b)] / nk;
                        cov[(a, b)] = val;
                        cov[(b, a)] = val;
                    }
                }
                gmm.means[c] = mean;
                gmm.covariances[c] = regularized(&cov);
            } else {
                // Collapsed component: re-seed at the point the current
                // model explains worst.
                let worst = point_ll
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                log::warn!(
                    "EM component {c} collapsed (weight {:.3e}); re-seeding at point {worst}",
                    nk / n as f64
                );
                reseeded_last_iter = true;
                gmm.weights[c] = 1.0 / n as f64;
                gmm.means[c] = DVector::from_column_slice(&rows[worst]);
                gmm.covariances[c] = regularized(&global_cov);
            }
        }
        // Renormalize weights (re-seeding can perturb the simplex).
        let wsum: f64 = gmm.weights.iter().sum();
        for w in &mut gmm.weights {
            *w /= wsum;
        }
    }

    Ok(EmFit { gmm, log_likelihood_trace: trace })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn population_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let val = cov[(a, b)] / n as f64;
            cov[(a, b)] = val;
            cov[(b, a)] = val;
        }
    }
    cov
}

fn regularized(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = cov.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += COVARIANCE_REG;
    }
    out
}

/// Number of free parameters of a k-component full-covariance mixture:
/// `k·(1 + d + (d² + d)/2)`.
pub fn parameter_count(k: usize, d: usize) -> usize {
    k * (1 + d + (d * d + d) / 2)
}

/// Bayesian Information Criterion: `−2·log L + φ·log N`.
pub fn bic(gmm: &Gmm, rows: &[Vec<f64>]) -> Result<f64> {
    let ll = total_log_likelihood(gmm, rows)?;
    let phi = parameter_count(gmm.component_count(), gmm.dim()) as f64;
    Ok(-2.0 * ll + phi * (rows.len() as f64).ln())
}

/// Total log-likelihood of rows under the mixture.
pub fn total_log_likelihood(gmm: &Gmm, rows: &[Vec<f64>]) -> Result<f64> {
    let comps = component_densities(gmm)?;
    let mut scratch = Vec::with_capacity(gmm.dim());
    let mut total = 0.0;
    let mut logs = vec![0.0; comps.len()];
    for row in rows {
        let mut max = f64::NEG_INFINITY;
        for (c, comp) in comps.iter().enumerate() {
            logs[c] = component_log_density(comp, row, &mut scratch);
            max = max.max(logs[c]);
        }
        total += max + logs.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    }
    Ok(total)
}

/// One point of the BIC-vs-k curve; `bic` is absent when the fit failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BicPoint {
    pub k: usize,
    pub bic: Option<f64>,
}

/// Outcome of a component-count search.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub chosen_k: usize,
    pub gmm: Gmm,
    pub bic_curve: Vec<BicPoint>,
}

/// Fit every k in the grid and choose by BIC, preferring the lowest
/// complexity within 1% of the minimum.
pub fn select_k(rows: &[Vec<f64>], k_grid: &[usize], seed: u64, opts: &EmOptions) -> Result<KSelection> {
    if k_grid.is_empty() {
        return Err(Error::InvalidInput("k_grid must not be empty".into()));
    }
    let mut curve = Vec::with_capacity(k_grid.len());
    let mut fits: Vec<(usize, Gmm, f64)> = Vec::new();
    for &k in k_grid {
        match em_fit(rows, k, crate::seed::derive_seed(seed, k as u64), opts)
            .and_then(|fit| bic(&fit.gmm, rows).map(|b| (fit, b)))
        {
            Ok((fit, b)) => {
                curve.push(BicPoint { k, bic: Some(b) });
                fits.push((k, fit.gmm, b));
            }
            Err(err) => {
                log::warn!("EM fit failed for k={k}: {err}");
                curve.push(BicPoint { k, bic: None });
            }
        }
    }
    if fits.is_empty() {
        return Err(Error::Fit("every component count in the grid failed".into()));
    }
    let min_bic = fits.iter().map(|f| f.2).fold(f64::INFINITY, f64::min);
    let threshold = min_bic + 0.01 * min_bic.abs();
    let chosen = fits
        .iter()
        .filter(|f| f.2 <= threshold)
        .min_by_key(|f| f.0)
        .unwrap();
    Ok(KSelection { chosen_k: chosen.0, gmm: chosen.1.clone(), bic_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::sample::gmm_sample;
    use rand_distr::{Distribution, StandardNormal};

    fn two_feature_rows(seed: u64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, 0);
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![2.0 * a + 1.0, a + 0.5 * b]
            })
            .collect()
    }

    fn known_three_component() -> Gmm {
        Gmm {
            weights: vec![0.5, 0.3, 0.2],
            means: vec![
                DVector::from_column_slice(&[0.0, 0.0]),
                DVector::from_column_slice(&[5.0, 0.0]),
                DVector::from_column_slice(&[0.0, 5.0]),
            ],
            covariances: vec![DMatrix::identity(2, 2); 3],
        }
    }

    #[test]
    fn single_component_matches_closed_form() {
        let rows = two_feature_rows(1, 500);
        let fit = em_fit(&rows, 1, 0, &EmOptions::default()).unwrap();
        let n = rows.len() as f64;
        let mean0: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / n;
        let mean1: f64 = rows.iter().map(|r| r[1]).sum::<f64>() / n;
        assert!((fit.gmm.means[0][0] - mean0).abs() < 1e-9);
        assert!((fit.gmm.means[0][1] - mean1).abs() < 1e-9);
        let var0: f64 = rows.iter().map(|r| (r[0] - mean0).powi(2)).sum::<f64>() / n;
        assert!((fit.gmm.covariances[0][(0, 0)] - var0 - COVARIANCE_REG).abs() < 1e-9);
        assert_eq!(fit.gmm.weights, vec![1.0]);
    }

    #[test]
    fn log_likelihood_trace_is_non_decreasing() {
        let gmm = known_three_component();
        let rows = gmm_sample(&gmm, 2_000, 9).unwrap();
        let fit = em_fit(&rows, 3, 4, &EmOptions::default()).unwrap();
        for w in fit.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn recovers_well_separated_mixture() {
        let truth = known_three_component();
        let rows = gmm_sample(&truth, 10_000, 7).unwrap();
        let fit = em_fit(&rows, 3, 11, &EmOptions::default()).unwrap();
        // Match fitted components to true ones by nearest mean.
        let mut used = [false; 3];
        for true_mean in &truth.means {
            let (best, dist) = fit
                .gmm
                .means
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, m)| (i, (m - true_mean).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            used[best] = true;
            assert!(dist < 0.1, "mean error {dist}");
        }
    }

    #[test]
    fn large_sample_fit_recovers_parameters_within_five_percent() {
        // Two well-separated components, 1e5 samples: weights, means, and
        // covariances all land within 5% (relative, permutation-matched).
        let truth = Gmm {
            weights: vec![0.6, 0.4],
            means: vec![
                DVector::from_column_slice(&[0.0, 0.0]),
                DVector::from_column_slice(&[6.0, 4.0]),
            ],
            covariances: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
                DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 1.2]),
            ],
        };
        let rows = gmm_sample(&truth, 100_000, 31).unwrap();
        let fit = em_fit(&rows, 2, 32, &EmOptions { restarts: 1, ..Default::default() }).unwrap();
        // Match by nearest mean.
        let order: Vec<usize> = truth
            .means
            .iter()
            .map(|tm| {
                fit.gmm
                    .means
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - tm).norm().partial_cmp(&(b.1 - tm).norm()).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        assert_ne!(order[0], order[1]);
        for (t, &f) in order.iter().enumerate() {
            let rel_w = (fit.gmm.weights[f] - truth.weights[t]).abs() / truth.weights[t];
            assert!(rel_w < 0.05, "weight {t}: {rel_w}");
            let rel_m = (&fit.gmm.means[f] - &truth.means[t]).norm() / truth.means[t].norm().max(1.0);
            assert!(rel_m < 0.05, "mean {t}: {rel_m}");
            let rel_c = (&fit.gmm.covariances[f] - &truth.covariances[t]).norm()
                / truth.covariances[t].norm();
            assert!(rel_c < 0.05, "cov {t}: {rel_c}");
        }
    }

    #[test]
    fn parameter_count_matches_reference_values() {
        assert_eq!(parameter_count(1, 96), 4_753);
        assert_eq!(parameter_count(21, 7), 756);
    }

    #[test]
    fn bic_selects_true_component_count() {
        let truth = known_three_component();
        let rows = gmm_sample(&truth, 10_000, 21).unwrap();
        let grid: Vec<usize> = (1..=8).collect();
        let sel = select_k(&rows, &grid, 13, &EmOptions::default()).unwrap();
        assert_eq!(sel.chosen_k, 3, "curve: {:?}", sel.bic_curve);
        assert_eq!(sel.bic_curve.len(), 8);
    }

    #[test]
    fn k_not_less_than_n_errors() {
        let rows = two_feature_rows(2, 5);
        assert!(matches!(
            em_fit(&rows, 5, 0, &EmOptions::default()),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
