//! Principal component analysis.
//!
//! Components come from a symmetric eigendecomposition of the d'×d' Gram
//! matrix of the centered data (d' ≤ 96 here, so the Gram problem is the
//! small one). Population (1/N) variance convention; eigenvalues sorted
//! descending with ties kept in first-occurrence order, and eigenvector
//! signs fixed so the entry of largest magnitude is positive.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fitted PCA basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// C × d' matrix; rows are unit-norm eigenvectors.
    pub components: Vec<Vec<f64>>,
    /// Column means of the training matrix, length d'.
    pub column_means: Vec<f64>,
    /// Fraction of total variance carried by each kept component.
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.column_means.len()
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn cumulative_explained(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }
}

/// Fit the top-C principal components of `rows` (N × d').
pub fn pca_fit(rows: &[Vec<f64>], c: usize) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::TooFewSamples { context: "pca_fit", needed: 1, got: n });
    }
    let d = rows[0].len();
    if c < 1 || c > d.min(n) {
        return Err(Error::InvalidInput(format!(
            "component count {c} out of range [1, {}]",
            d.min(n)
        )));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::DimMismatch { context: "pca_fit row", expected: d, actual: 0 });
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pca_fit input".into()));
    }

    let mut means = vec![0.0; d];
    for r in rows {
        for (m, &x) in means.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }

    // Gram matrix of the centered data divided by N = population covariance.
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            centered[j] = r[j] - means[j];
        }
        for j in 0..d {
            let cj = centered[j];
            if cj != 0.0 {
                for k in j..d {
                    cov[(j, k)] += cj * centered[k];
                }
            }
        }
    }
    for j in 0..d {
        for k in j..d {
            let val = cov[(j, k)] / n as f64;
            cov[(j, k)] = val;
            cov[(k, j)] = val;
        }
    }

    let eig = cov.symmetric_eigen();
    // Stable descending sort of eigenvalue indices.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let denom = if total > 0.0 { total } else { 1.0 };

    let mut components = Vec::with_capacity(c);
    for &i in order.iter().take(c) {
        let col = eig.eigenvectors.column(i);
        let mut row: Vec<f64> = col.iter().copied().collect();
        // Deterministic sign: largest-magnitude entry positive.
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            for x in &mut row {
                *x = -*x;
            }
        }
        components.push(row);
    }

    let explained_variance_ratio = eigenvalues.iter().take(c).map(|&l| l / denom).collect();
    Ok(PcaModel { components, column_means: means, explained_variance_ratio })
}

/// Project a d'-vector into the C-dimensional component space.
pub fn pca_project(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimMismatch {
            context: "pca_project",
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    let mut out = vec![0.0; model.component_count()];
    for (yi, comp) in out.iter_mut().zip(&model.components) {
        *yi = comp
            .iter()
            .zip(x)
            .zip(&model.column_means)
            .map(|((&c, &x), &m)| c * (x - m))
            .sum();
    }
    Ok(out)
}

/// Map a component-space vector back to the original space.
pub fn pca_reconstruct(model: &PcaModel, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.component_count() {
        return Err(Error::DimMismatch {
            context: "pca_reconstruct",
            expected: model.component_count(),
            actual: y.len(),
        });
    }
    let mut out = model.column_means.clone();
    for (comp, &yi) in model.components.iter().zip(y) {
        for (o, &c) in out.iter_mut().zip(comp) {
            *o += yi * c;
        }
    }
    Ok(out)
}

/// Project a batch of rows.
pub fn pca_project_rows(model: &PcaModel, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter().map(|r| pca_project(model, r)).collect()
}
