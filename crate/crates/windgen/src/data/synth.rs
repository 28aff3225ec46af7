//! Synthetic wind-profile oracle.
//!
//! Profiles follow the neutral boundary-layer log law
//! `s(z) = (u*/κ)·ln(z/z0)` with κ = 0.4. Each sample draws a regime by
//! weight, a direction around the regime mean, and independent Gaussian
//! noise per velocity component, then is labeled from its altitude-averaged
//! speed and its drawn direction snapped to the compass. Generation is
//! bit-reproducible: sample `i` uses an RNG stream derived from
//! `(seed, i)`, so results are independent of chunking.

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::io::altitude_grid;
use crate::data::{Dataset, DirectionSet, SpeedBins, WindProfile};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Von Kármán constant.
pub const VON_KARMAN: f64 = 0.4;

/// One synthetic wind regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    /// Mixture weight; weights must sum to 1.
    pub weight: f64,
    /// Friction speed u* in m/s.
    pub u_star: f64,
    /// Mean direction in radians (math convention, u = s·cos θ).
    pub direction_mean: f64,
    /// Direction standard deviation in radians.
    pub direction_spread: f64,
    /// Surface roughness length z0 in meters.
    pub z0: f64,
}

/// Configuration of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub regimes: Vec<Regime>,
    /// Standard deviation of per-component velocity noise in m/s.
    pub noise_std: f64,
    pub altitude_count: usize,
    /// (lowest, highest) altitude in meters.
    pub altitude_range: (f64, f64),
    pub seed: u64,
}

impl SynthConfig {
    /// Four log-law regimes whose altitude-averaged speeds land in the four
    /// reference bins, all centered between WSW and W so the surrounding
    /// compass sectors {SW, WSW, W, WNW} each receive samples.
    pub fn four_regime_reference(n_samples: usize, seed: u64) -> Self {
        let direction_mean = (90.0 - 258.75_f64).to_radians();
        let direction_spread = 30.0_f64.to_radians();
        let regime = |u_star: f64| Regime {
            weight: 0.25,
            u_star,
            direction_mean,
            direction_spread,
            z0: 0.1,
        };
        Self {
            n_samples,
            regimes: vec![regime(0.06), regime(0.21), regime(0.38), regime(0.63)],
            noise_std: 0.3,
            altitude_count: 47,
            altitude_range: (20.0, 250.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_samples == 0 {
            problems.push("n_samples must be positive".to_string());
        }
        if self.regimes.is_empty() {
            problems.push("at least one regime is required".to_string());
        }
        let weight_sum: f64 = self.regimes.iter().map(|r| r.weight).sum();
        if self.regimes.iter().any(|r| r.weight <= 0.0) {
            problems.push("regime weights must be positive".to_string());
        } else if (weight_sum - 1.0).abs() > 1e-9 {
            problems.push(format!("regime weights sum to {weight_sum}, expected 1"));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if r.z0 <= 0.0 {
                problems.push(format!("regime {i}: z0 must be positive"));
            } else if self.altitude_range.0 <= r.z0 {
                problems.push(format!("regime {i}: lowest altitude must exceed z0"));
            }
            if r.u_star < 0.0 {
                problems.push(format!("regime {i}: u_star must be non-negative"));
            }
            if r.direction_spread < 0.0 {
                problems.push(format!("regime {i}: direction_spread must be non-negative"));
            }
        }
        if self.noise_std < 0.0 {
            problems.push("noise_std must be non-negative".to_string());
        }
        if self.altitude_count == 0 {
            problems.push("altitude_count must be positive".to_string());
        }
        if self.altitude_range.0 >= self.altitude_range.1 && self.altitude_count > 1 {
            problems.push("altitude_range must be increasing".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { problems })
        }
    }
}

/// Mean wind speed at height `z` under the neutral log law.
pub fn log_law_speed(u_star: f64, z: f64, z0: f64) -> f64 {
    (u_star / VON_KARMAN) * (z / z0).ln()
}

/// Generate a labeled synthetic dataset. Deterministic given the seed.
pub fn synth_generate(
    config: &SynthConfig,
    bins: &SpeedBins,
    dirs: &DirectionSet,
) -> Result<Dataset> {
    config.validate()?;
    let altitudes = altitude_grid(config.altitude_range, config.altitude_count);

    // Cumulative weights for regime selection.
    let mut cum = Vec::with_capacity(config.regimes.len());
    let mut acc = 0.0;
    for r in &config.regimes {
        acc += r.weight;
        cum.push(acc);
    }

    let mut profiles = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let mut rng = rng_for(config.seed, i as u64);
        let pick: f64 = rng.random();
        let regime_idx = cum.iter().position(|&c| pick < c).unwrap_or(cum.len() - 1);
        let regime = &config.regimes[regime_idx];

        let eta: f64 = StandardNormal.sample(&mut rng);
        let theta = regime.direction_mean + regime.direction_spread * eta;
        let (sin_t, cos_t) = theta.sin_cos();

        let mut u = Vec::with_capacity(altitudes.len());
        let mut v = Vec::with_capacity(altitudes.len());
        for &z in &altitudes {
            let s = log_law_speed(regime.u_star, z, regime.z0);
            let eu: f64 = StandardNormal.sample(&mut rng);
            let ev: f64 = StandardNormal.sample(&mut rng);
            u.push(s * cos_t + config.noise_std * eu);
            v.push(s * sin_t + config.noise_std * ev);
        }

        let mean_speed =
            u.iter().zip(&v).map(|(&u, &v)| u.hypot(v)).sum::<f64>() / altitudes.len() as f64;
        let condition = crate::data::ConditionLabel {
            speed_bin: bins.bin_of(mean_speed)?,
            direction: dirs.snap_angle(theta),
        };
        profiles.push(WindProfile { u, v, condition });
    }

    Dataset::new(profiles, altitudes)
}
