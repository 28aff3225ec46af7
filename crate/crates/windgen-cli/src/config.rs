//! Run configuration: strict TOML with all violations reported at once.

use serde::{Deserialize, Serialize};
use windgen::data::{DirectionSet, Regime, SpeedBins, SynthConfig};
use windgen::ddpm::default_schedule;
use windgen::fm::{FlowConfig, Integrator};
use windgen::gmm::{EmOptions, GmmTrainConfig, DEFAULT_MAX_DRAWS};
use windgen::checkpoint::{DdpmHyperParams, DgmTrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// CSV dataset source; mutually exclusive with `synth`.
    pub dataset: Option<DatasetSection>,
    /// Synthetic-data source; mutually exclusive with `dataset`.
    pub synth: Option<SynthSection>,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub kfold: KfoldSection,
    /// Base seed; the `--seed` flag overrides it.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: String,
    #[serde(default = "default_altitude_range")]
    pub altitude_range: (f64, f64),
}

fn default_altitude_range() -> (f64, f64) {
    (20.0, 250.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_samples: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_altitude_count")]
    pub altitude_count: usize,
    #[serde(default = "default_altitude_range")]
    pub altitude_range: (f64, f64),
    pub regimes: Vec<RegimeSection>,
}

fn default_noise_std() -> f64 {
    0.3
}

fn default_altitude_count() -> usize {
    47
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub weight: f64,
    /// Friction speed u* in m/s.
    pub u_star: f64,
    /// Mean wind bearing in compass degrees (N = 0, clockwise).
    pub direction_mean_deg: f64,
    #[serde(default)]
    pub direction_spread_deg: f64,
    #[serde(default = "default_z0")]
    pub z0: f64,
}

fn default_z0() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKindSection,
    #[serde(default)]
    pub gmm: GmmSection,
    #[serde(default)]
    pub dgm: DgmSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindSection {
    Gmm,
    Ddpm,
    Fm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSection {
    pub components: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub em_restarts: usize,
    pub max_draws: u64,
}

impl Default for GmmSection {
    fn default() -> Self {
        Self {
            components: 7,
            k_min: 1,
            k_max: 40,
            em_tol: 1e-6,
            em_max_iter: 200,
            em_restarts: 3,
            max_draws: DEFAULT_MAX_DRAWS,
        }
    }
}

impl GmmSection {
    pub fn to_train_config(&self) -> GmmTrainConfig {
        GmmTrainConfig {
            components: self.components,
            k_grid: (self.k_min..=self.k_max).collect(),
            em: EmOptions {
                tol: self.em_tol,
                max_iter: self.em_max_iter,
                restarts: self.em_restarts,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgmSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: f64,
    pub n_steps: usize,
    pub integrator: IntegratorSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorSection {
    Euler,
    Heun,
}

impl Default for DgmSection {
    fn default() -> Self {
        let base = DgmTrainConfig::default();
        let schedule = default_schedule();
        Self {
            steps: base.steps,
            batch_size: base.batch_size,
            lr: base.lr,
            base_width: base.base_width,
            depth: base.depth,
            time_embed_dim: base.time_embed_dim,
            groups: base.groups,
            t_count: schedule.len(),
            beta_start: base.ddpm.beta_start,
            beta_end: base.ddpm.beta_end,
            sigma: base.flow.sigma,
            n_steps: base.flow.n_steps,
            integrator: IntegratorSection::Euler,
        }
    }
}

impl DgmSection {
    pub fn to_train_config(&self) -> DgmTrainConfig {
        DgmTrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            base_width: self.base_width,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
            groups: self.groups,
            ddpm: DdpmHyperParams {
                t_count: self.t_count,
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            },
            flow: FlowConfig {
                sigma: self.sigma,
                n_steps: self.n_steps,
                integrator: match self.integrator {
                    IntegratorSection::Euler => Integrator::Euler,
                    IntegratorSection::Heun => Integrator::Heun,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_unconditional: usize,
    pub n_per_condition: usize,
    pub k_neighbors: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_unconditional: 2000, n_per_condition: 400, k_neighbors: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfoldSection {
    /// Compass tokens of the held-out grid columns.
    pub directions: Vec<String>,
    /// Speed-bin indices of the held-out grid rows.
    pub speed_bins: Vec<usize>,
}

impl Default for KfoldSection {
    fn default() -> Self {
        Self {
            directions: ["SW", "WSW", "W", "WNW"].map(String::from).to_vec(),
            speed_bins: vec![0, 1, 2, 3],
        }
    }
}

impl RunConfig {
    /// Parse and validate, reporting every violation at once.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        let problems = config.validate();
        if !problems.is_empty() {
            anyhow::bail!("invalid configuration: {}", problems.join("; "));
        }
        Ok(config)
    }

    fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        match (&self.dataset, &self.synth) {
            (None, None) => problems.push("exactly one data source required: add [dataset] or [synth]".into()),
            (Some(_), Some(_)) => {
                problems.push("exactly one data source required: both [dataset] and [synth] present".into())
            }
            _ => {}
        }
        let dirs = DirectionSet::compass16();
        for token in &self.kfold.directions {
            if dirs.index_of(token).is_none() {
                problems.push(format!("kfold direction `{token}` is not a compass token"));
            }
        }
        let bins = SpeedBins::reference();
        for &b in &self.kfold.speed_bins {
            if b >= bins.len() {
                problems.push(format!("kfold speed bin {b} out of range 0..{}", bins.len()));
            }
        }
        if let Some(synth) = &self.synth {
            if synth.regimes.is_empty() {
                problems.push("synth requires at least one [[synth.regimes]] entry".into());
            }
            let weight_sum: f64 = synth.regimes.iter().map(|r| r.weight).sum();
            if !synth.regimes.is_empty() && (weight_sum - 1.0).abs() > 1e-9 {
                problems.push(format!("synth regime weights sum to {weight_sum}, expected 1"));
            }
        }
        if let Some(model) = &self.model {
            if model.gmm.k_min == 0 || model.gmm.k_min > model.gmm.k_max {
                problems.push("gmm k grid requires 1 <= k_min <= k_max".into());
            }
            if model.dgm.steps == 0 || model.dgm.batch_size == 0 {
                problems.push("dgm steps and batch_size must be positive".into());
            }
        }
        problems
    }

    /// Build the synthetic-generator config (bearings converted to math
    /// angles), applying the effective seed.
    pub fn synth_config(&self, seed: u64) -> anyhow::Result<SynthConfig> {
        let synth = self
            .synth
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config has no [synth] section"))?;
        Ok(SynthConfig {
            n_samples: synth.n_samples,
            regimes: synth
                .regimes
                .iter()
                .map(|r| Regime {
                    weight: r.weight,
                    u_star: r.u_star,
                    direction_mean: (90.0 - r.direction_mean_deg).to_radians(),
                    direction_spread: r.direction_spread_deg.to_radians(),
                    z0: r.z0,
                })
                .collect(),
            noise_std: synth.noise_std,
            altitude_count: synth.altitude_count,
            altitude_range: synth.altitude_range,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_synth_config_parses() {
        let text = r#"
[synth]
n_samples = 100
[[synth.regimes]]
weight = 1.0
u_star = 0.4
direction_mean_deg = 270.0
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.synth.as_ref().unwrap().n_samples, 100);
        assert_eq!(cfg.synth.as_ref().unwrap().altitude_count, 47);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
[synth]
n_samples = 100
typo_key = 1
[[synth.regimes]]
weight = 1.0
u_star = 0.4
direction_mean_deg = 270.0
"#;
        assert!(RunConfig::parse(text).is_err());
    }

    #[test]
    fn all_violations_reported_together() {
        let text = r#"
[dataset]
path = "a.csv"
[synth]
n_samples = 10
regimes = []
[kfold]
directions = ["QQ"]
speed_bins = [9]
"#;
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("both [dataset] and [synth]"), "{err}");
        assert!(err.contains("QQ"), "{err}");
        assert!(err.contains("speed bin 9"), "{err}");
        assert!(err.contains("at least one"), "{err}");
    }

    #[test]
    fn bearing_converts_to_math_angle() {
        let text = r#"
[synth]
n_samples = 10
[[synth.regimes]]
weight = 1.0
u_star = 0.4
direction_mean_deg = 90.0
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let sc = cfg.synth_config(0).unwrap();
        // Bearing 90° (east) is math angle 0.
        assert!(sc.regimes[0].direction_mean.abs() < 1e-12);
    }
}
