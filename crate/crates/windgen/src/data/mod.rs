//! Dataset types, condition encoding, normalization, synthetic generation,
//! and condition-holdout splitting.

mod compass;
mod io;
mod scaler;
mod synth;

pub use compass::{DirectionSet, COMPASS_16};
pub use io::{
    altitude_grid, load_dataset, write_dataset_csv, write_profiles_csv, CsvSchema, LoadReport,
};
pub use scaler::{Scaler, STD_FLOOR};
pub use synth::{log_law_speed, synth_generate, Regime, SynthConfig, VON_KARMAN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Macroweather condition: a speed-bin index and a compass-direction index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub speed_bin: usize,
    pub direction: usize,
}

impl ConditionLabel {
    pub fn new(speed_bin: usize, direction: usize) -> Self {
        Self { speed_bin, direction }
    }

    /// Human-readable `TOKEN:BIN` form, e.g. `SW:2`.
    pub fn display(&self, dirs: &DirectionSet) -> String {
        format!("{}:{}", dirs.token(self.direction), self.speed_bin)
    }
}

/// Ordered macroweather wind-speed bin boundaries in m/s.
///
/// Bin `i` covers `[edges[i], edges[i+1])`; speeds at or above the last edge
/// clamp into the last bin, so the bins partition `[0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedBins {
    pub edges: Vec<f64>,
}

impl SpeedBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidInput("speed bins need at least two edges".into()));
        }
        if edges[0] != 0.0 {
            return Err(Error::InvalidInput("first speed-bin edge must be 0.0".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("speed-bin edges must be strictly increasing".into()));
        }
        Ok(Self { edges })
    }

    /// The four reference bins: (0, 2.23), (2.23, 5.36), (5.36, 8.05),
    /// (8.05, 15.65) m/s.
    pub fn reference() -> Self {
        Self { edges: vec![0.0, 2.23, 5.36, 8.05, 15.65] }
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Bin index for a speed; left-closed bins, clamped above the last edge.
    pub fn bin_of(&self, speed: f64) -> Result<usize> {
        if !speed.is_finite() || speed < 0.0 {
            return Err(Error::InvalidInput(format!("speed must be finite and >= 0, got {speed}")));
        }
        for i in 0..self.len() {
            if speed < self.edges[i + 1] {
                return Ok(i);
            }
        }
        Ok(self.len() - 1)
    }

    /// Midpoint of a bin, used as the bin's numeric representative.
    pub fn midpoint(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }
}

/// One observation: u/v velocity at each altitude plus a condition label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindProfile {
    /// East velocity component per altitude (m/s).
    pub u: Vec<f64>,
    /// North velocity component per altitude (m/s).
    pub v: Vec<f64>,
    pub condition: ConditionLabel,
}

impl WindProfile {
    pub fn altitude_count(&self) -> usize {
        self.u.len()
    }

    /// Scalar speed √(u² + v²) at each altitude.
    pub fn speeds(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(&u, &v)| u.hypot(v)).collect()
    }

    /// Altitude-averaged (u, v), the 2D summary used in bivariate plots.
    pub fn mean_uv(&self) -> (f64, f64) {
        let n = self.u.len() as f64;
        (self.u.iter().sum::<f64>() / n, self.v.iter().sum::<f64>() / n)
    }

    /// Flatten to `[u_1..u_A, v_1..v_A]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.u.len());
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.v);
        out
    }

    /// Rebuild from a flattened `[u..., v...]` vector.
    pub fn from_flat(flat: &[f64], condition: ConditionLabel) -> Self {
        let a = flat.len() / 2;
        Self { u: flat[..a].to_vec(), v: flat[a..].to_vec(), condition }
    }
}

/// A collection of wind profiles over a shared altitude grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub profiles: Vec<WindProfile>,
    /// Altitude of each measurement level in meters, strictly increasing.
    pub altitudes: Vec<f64>,
    pub scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(profiles: Vec<WindProfile>, altitudes: Vec<f64>) -> Result<Self> {
        if altitudes.is_empty() {
            return Err(Error::InvalidInput("altitude grid must not be empty".into()));
        }
        if altitudes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("altitudes must be strictly increasing".into()));
        }
        let a = altitudes.len();
        for p in &profiles {
            if p.u.len() != a || p.v.len() != a {
                return Err(Error::DimMismatch {
                    context: "Dataset profile length",
                    expected: a,
                    actual: p.u.len(),
                });
            }
        }
        Ok(Self { profiles, altitudes, scaler: None })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Number of altitude levels A.
    pub fn altitude_count(&self) -> usize {
        self.altitudes.len()
    }

    /// Flattened micro design matrix, one `[u..., v...]` row per profile.
    pub fn flat_rows(&self) -> Vec<Vec<f64>> {
        self.profiles.iter().map(WindProfile::flatten).collect()
    }

    /// Distinct condition labels present, in sorted order.
    pub fn labels(&self) -> Vec<ConditionLabel> {
        let mut labels: Vec<ConditionLabel> = self.profiles.iter().map(|p| p.condition).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Profiles carrying one label.
    pub fn with_label(&self, label: ConditionLabel) -> Vec<&WindProfile> {
        self.profiles.iter().filter(|p| p.condition == label).collect()
    }
}

/// Encode a macroweather observation as a categorical condition label.
pub fn encode_condition(
    speed: f64,
    direction: &str,
    bins: &SpeedBins,
    dirs: &DirectionSet,
) -> Result<ConditionLabel> {
    let speed_bin = bins.bin_of(speed)?;
    let direction = dirs
        .index_of(direction)
        .ok_or_else(|| Error::InvalidInput(format!("unknown direction token `{direction}`")))?;
    Ok(ConditionLabel { speed_bin, direction })
}

/// Numeric (u, v) encoding of a condition label: the bin's midpoint speed
/// pointed along the direction's angle. The alternative to the categorical
/// encoding, used for the joint-space mixture model.
pub fn condition_to_uv(label: ConditionLabel, bins: &SpeedBins, dirs: &DirectionSet) -> (f64, f64) {
    let s = bins.midpoint(label.speed_bin);
    let theta = dirs.angle_rad(label.direction);
    (s * theta.cos(), s * theta.sin())
}

/// Decode macro (u, v) elements back to a condition label via the same
/// encoder used at ingestion.
pub fn decode_condition_uv(
    u: f64,
    v: f64,
    bins: &SpeedBins,
    dirs: &DirectionSet,
) -> Result<ConditionLabel> {
    let speed = u.hypot(v);
    let direction = dirs.snap_uv(u, v);
    let speed_bin = bins.bin_of(speed)?;
    Ok(ConditionLabel { speed_bin, direction })
}

/// Fit a z-score scaler over the flattened micro profiles of a dataset.
pub fn fit_scaler(dataset: &Dataset) -> Result<Scaler> {
    Scaler::fit(&dataset.flat_rows())
}

/// Result of a condition-holdout split.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Set when the holdout label is absent from the dataset.
    pub holdout_missing: bool,
}

/// Partition a dataset into profiles without (`train`) and with (`test`)
/// the holdout label. The two parts exactly partition the input.
pub fn split_holdout(dataset: &Dataset, holdout: ConditionLabel) -> HoldoutSplit {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in &dataset.profiles {
        if p.condition == holdout {
            test.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    let holdout_missing = test.is_empty();
    HoldoutSplit {
        train: Dataset { profiles: train, altitudes: dataset.altitudes.clone(), scaler: None },
        test: Dataset { profiles: test, altitudes: dataset.altitudes.clone(), scaler: None },
        holdout_missing,
    }
}
