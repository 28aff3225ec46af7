//! Shared statistics: PCA reduction, distribution distance, and
//! descriptive profile statistics.

mod kl;
mod pca;

pub use kl::symmetrized_kl;
pub use pca::{pca_fit, pca_project, pca_project_rows, pca_reconstruct, PcaModel};

use serde::{Deserialize, Serialize};

use crate::data::WindProfile;
use crate::error::{Error, Result};

/// Per-altitude mean and standard deviation of scalar wind speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean and population standard deviation of √(u² + v²) at each altitude.
pub fn profile_stats(samples: &[&WindProfile]) -> Result<ProfileStats> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let a = samples[0].altitude_count();
    for p in samples {
        if p.altitude_count() != a {
            return Err(Error::DimMismatch {
                context: "profile_stats",
                expected: a,
                actual: p.altitude_count(),
            });
        }
    }
    let speeds: Vec<Vec<f64>> = samples.iter().map(|p| p.speeds()).collect();
    let mut mean = vec![0.0; a];
    for row in &speeds {
        for (m, &s) in mean.iter_mut().zip(row) {
            *m += s;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Two-pass variance avoids cancellation for near-constant speeds.
    let mut var = vec![0.0; a];
    for row in &speeds {
        for ((v, &s), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = s - m;
            *v += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(ProfileStats { mean, std })
}
