//! Per-element z-score normalization.
//!
//! Fitted on the training split only; test data and generated samples reuse
//! the training scaler. Population (1/N) variance convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum standard deviation; smaller values are clamped so constant
/// columns map to zero instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-element affine normalizer: `forward(x) = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fit means and standard deviations over rows of equal length.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::DimMismatch {
                    context: "Scaler::fit row",
                    expected: d,
                    actual: rows[i].len(),
                });
            }
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
                let dx = x - m;
                *v += dx * dx;
            }
        }
        let std = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalize a vector in place.
    pub fn forward(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        for ((x, &m), &s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    /// Undo normalization in place.
    pub fn inverse(&self, x: &mut [f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        for ((x, &m), &s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = *x * s + m;
        }
    }

    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.forward(&mut out);
        out
    }

    pub fn inverse_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.inverse(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(Scaler::fit(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let rows = vec![vec![5.0, 1.0], vec![5.0, 3.0], vec![5.0, 2.0]];
        let s = Scaler::fit(&rows).unwrap();
        let y = s.forward_vec(&rows[0]);
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn single_row_maps_to_all_zeros() {
        let rows = vec![vec![1.0, -2.0, 7.5]];
        let s = Scaler::fit(&rows).unwrap();
        assert!(s.forward_vec(&rows[0]).iter().all(|&y| y == 0.0));
    }

    #[test]
    fn normalized_training_set_has_zero_mean_unit_std() {
        let mut rows = Vec::new();
        let mut x = 0.37_f64;
        for _ in 0..200 {
            x = (x * 997.0 + 0.1234).fract();
            rows.push(vec![x * 10.0 - 3.0, x * x, (x * 6.25).sin()]);
        }
        let s = Scaler::fit(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| s.forward_vec(r)).collect();
        let n = scaled.len() as f64;
        for j in 0..3 {
            let mean: f64 = scaled.iter().map(|r| r[j]).sum::<f64>() / n;
            let var: f64 = scaled.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let rows = vec![vec![0.4, -1.0, 2.0], vec![1.5, 2.5, -3.0], vec![9.0, 0.0, 0.5]];
        let s = Scaler::fit(&rows).unwrap();
        for r in &rows {
            let back = s.inverse_vec(&s.forward_vec(r));
            for (a, b) in back.iter().zip(r) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-10);
            }
        }
    }
}
