//! Sampling from and evaluating a fitted mixture.

use nalgebra::DMatrix;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gmm::em::{cholesky_lower, component_densities, component_log_density, Gmm};
use crate::seed::rng_for;

/// Cholesky factors of every component covariance, computed once per model.
pub(crate) struct SamplerFactors {
    pub cum_weights: Vec<f64>,
    pub factors: Vec<DMatrix<f64>>,
}

pub(crate) fn sampler_factors(gmm: &Gmm) -> Result<SamplerFactors> {
    let mut cum = Vec::with_capacity(gmm.component_count());
    let mut acc = 0.0;
    for &w in &gmm.weights {
        acc += w;
        cum.push(acc);
    }
    let factors = gmm
        .covariances
        .iter()
        .map(|cov| {
            cholesky_lower(cov)
                .ok_or_else(|| Error::Fit("covariance not positive definite".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplerFactors { cum_weights: cum, factors })
}

pub(crate) fn draw_one(
    gmm: &Gmm,
    f: &SamplerFactors,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let pick: f64 = rng.random();
    let c = f
        .cum_weights
        .iter()
        .position(|&w| pick < w)
        .unwrap_or(f.cum_weights.len() - 1);
    let d = gmm.dim();
    let mut z = vec![0.0; d];
    for zi in &mut z {
        *zi = StandardNormal.sample(rng);
    }
    let l = &f.factors[c];
    let mean = &gmm.means[c];
    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut acc = mean[i];
        for j in 0..=i {
            acc += l[(i, j)] * z[j];
        }
        out[i] = acc;
    }
    out
}

/// Draw `n` joint samples. Sample `i` uses its own RNG stream derived from
/// `(seed, i)`, so output is bit-reproducible and chunking-independent.
pub fn gmm_sample(gmm: &Gmm, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let f = sampler_factors(gmm)?;
    Ok((0..n)
        .map(|i| draw_one(gmm, &f, &mut rng_for(seed, i as u64)))
        .collect())
}

/// Log density of the mixture at a point (log-sum-exp over components).
pub fn gmm_logpdf(gmm: &Gmm, y: &[f64]) -> Result<f64> {
    if y.len() != gmm.dim() {
        return Err(Error::DimMismatch {
            context: "gmm_logpdf",
            expected: gmm.dim(),
            actual: y.len(),
        });
    }
    let comps = component_densities(gmm)?;
    let mut scratch = Vec::with_capacity(gmm.dim());
    let logs: Vec<f64> = comps
        .iter()
        .map(|c| component_log_density(c, y, &mut scratch))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + logs.iter().map(|&l| (l - max).exp()).sum::<f64>().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn standard_gmm(k: usize, d: usize) -> Gmm {
        Gmm {
            weights: vec![1.0 / k as f64; k],
            means: vec![DVector::zeros(d); k],
            covariances: vec![DMatrix::identity(d, d); k],
        }
    }

    #[test]
    fn large_sample_matches_standard_normal_moments() {
        let gmm = standard_gmm(1, 2);
        let samples = gmm_sample(&gmm, 50_000, 3).unwrap();
        let n = samples.len() as f64;
        for j in 0..2 {
            let mean: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            assert!(mean.abs() < 0.02, "mean {mean}");
        }
        for a in 0..2 {
            for b in 0..2 {
                let cov: f64 = samples.iter().map(|s| s[a] * s[b]).sum::<f64>() / n;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((cov - expect).abs() < 0.05, "cov[{a}{b}] = {cov}");
            }
        }
    }

    #[test]
    fn degenerate_weight_draws_single_component() {
        let gmm = Gmm {
            weights: vec![1.0, 0.0],
            means: vec![
                DVector::from_column_slice(&[10.0]),
                DVector::from_column_slice(&[-10.0]),
            ],
            covariances: vec![DMatrix::identity(1, 1) * 1e-6; 2],
        };
        let samples = gmm_sample(&gmm, 200, 5).unwrap();
        assert!(samples.iter().all(|s| s[0] > 9.0));
    }

    #[test]
    fn fixed_seed_reproduces_exactly() {
        let gmm = standard_gmm(3, 4);
        let a = gmm_sample(&gmm, 64, 17).unwrap();
        let b = gmm_sample(&gmm, 64, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logpdf_matches_standard_normal_at_origin() {
        let gmm = standard_gmm(1, 2);
        let lp = gmm_logpdf(&gmm, &[0.0, 0.0]).unwrap();
        let expect = -(2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!((lp - (-1.837877)).abs() < 1e-6);
    }

    #[test]
    fn duplicate_components_collapse_to_single_density() {
        let one = standard_gmm(1, 2);
        let two = standard_gmm(2, 2);
        let y = [0.3, -0.7];
        let a = gmm_logpdf(&one, &y).unwrap();
        let b = gmm_logpdf(&two, &y).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn logpdf_matches_direct_summation() {
        let gmm = Gmm {
            weights: vec![0.5, 0.3, 0.2],
            means: vec![
                DVector::from_column_slice(&[0.0, 0.0]),
                DVector::from_column_slice(&[1.5, -1.0]),
                DVector::from_column_slice(&[-2.0, 0.5]),
            ],
            covariances: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
                DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.6]),
                DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.25]),
            ],
        };
        let y = [0.4, -0.2];
        // Direct summation with explicit 2x2 inverses.
        let mut total = 0.0;
        for c in 0..3 {
            let m = &gmm.means[c];
            let s = &gmm.covariances[c];
            let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
            let inv = [
                [s[(1, 1)] / det, -s[(0, 1)] / det],
                [-s[(1, 0)] / det, s[(0, 0)] / det],
            ];
            let dx = [y[0] - m[0], y[1] - m[1]];
            let maha = dx[0] * (inv[0][0] * dx[0] + inv[0][1] * dx[1])
                + dx[1] * (inv[1][0] * dx[0] + inv[1][1] * dx[1]);
            total += gmm.weights[c]
                * (1.0 / (2.0 * std::f64::consts::PI * det.sqrt()))
                * (-0.5 * maha).exp();
        }
        let lp = gmm_logpdf(&gmm, &y).unwrap();
        assert!((lp - total.ln()).abs() < 1e-10, "{lp} vs {}", total.ln());
    }

    #[test]
    fn logpdf_is_finite_for_model_samples() {
        let gmm = Gmm {
            weights: vec![0.7, 0.3],
            means: vec![
                DVector::from_column_slice(&[0.0, 0.0, 0.0]),
                DVector::from_column_slice(&[4.0, -2.0, 1.0]),
            ],
            covariances: vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 0.3],
        };
        for (i, s) in gmm_sample(&gmm, 100_000, 23).unwrap().iter().enumerate() {
            let lp = gmm_logpdf(&gmm, s).unwrap();
            assert!(lp.is_finite(), "sample {i} gave logpdf {lp}");
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let gmm = standard_gmm(1, 3);
        assert!(gmm_logpdf(&gmm, &[0.0, 0.0]).is_err());
    }
}
