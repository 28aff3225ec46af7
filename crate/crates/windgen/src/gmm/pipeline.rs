//! The joint-space mixture pipeline.
//!
//! Micro profiles and numeric macro conditions are concatenated into one
//! d' = 2A + 2 vector (47 u + 47 v + macro u + macro v = 96 at the reference
//! configuration), z-scored with a single scaler, reduced by PCA, and fitted
//! with a mixture. Conditional generation draws joint samples, reconstructs
//! the full vector, decodes the macro elements through the same bin and
//! compass encoders used at ingestion, and keeps only matching samples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    condition_to_uv, decode_condition_uv, ConditionLabel, Dataset, DirectionSet, Scaler,
    SpeedBins, WindProfile,
};
use crate::error::{Error, Result};
use crate::gmm::em::{select_k, BicPoint, EmOptions, Gmm};
use crate::gmm::sample::{draw_one, sampler_factors};
use crate::seed::rng_for;
use crate::stats::{pca_fit, pca_project, pca_reconstruct, PcaModel};

/// Draw budget before conditional sampling reports a no-mass condition.
pub const DEFAULT_MAX_DRAWS: u64 = 100_000_000;

const ARTIFACT_VERSION: u32 = 1;

/// Positions of the macro-condition elements inside the d' design vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionLayout {
    /// Leading length of the flattened micro profile (2A).
    pub micro_dims: usize,
    pub macro_u: usize,
    pub macro_v: usize,
}

/// A fitted mixture pipeline plus everything needed to decode its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPipeline {
    pub scaler: Scaler,
    pub pca: PcaModel,
    pub gmm: Gmm,
    pub condition_layout: ConditionLayout,
    pub bins: SpeedBins,
    pub dirs: DirectionSet,
    pub altitudes: Vec<f64>,
}

/// Hyperparameters for fitting the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmTrainConfig {
    /// PCA component count C.
    pub components: usize,
    /// Mixture sizes to search over.
    pub k_grid: Vec<usize>,
    pub em: EmOptions,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self { components: 7, k_grid: (1..=40).collect(), em: EmOptions::default() }
    }
}

/// Fit outcome: the pipeline plus the BIC curve behind the chosen k.
#[derive(Debug, Clone)]
pub struct GmmFitReport {
    pub pipeline: GmmPipeline,
    pub chosen_k: usize,
    pub bic_curve: Vec<BicPoint>,
}

/// Result of conditional rejection sampling.
#[derive(Debug, Clone)]
pub struct ConditionalDraw {
    pub profiles: Vec<WindProfile>,
    pub draws: u64,
    pub acceptance_rate: f64,
}

/// One design-matrix row: flattened profile plus numeric macro elements.
fn design_row(p: &WindProfile, bins: &SpeedBins, dirs: &DirectionSet) -> Vec<f64> {
    let mut row = p.flatten();
    let (mu, mv) = condition_to_uv(p.condition, bins, dirs);
    row.push(mu);
    row.push(mv);
    row
}

/// Fit scaler, PCA, and mixture on a dataset.
pub fn fit_gmm_pipeline(
    dataset: &Dataset,
    bins: &SpeedBins,
    dirs: &DirectionSet,
    cfg: &GmmTrainConfig,
    seed: u64,
) -> Result<GmmFitReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows: Vec<Vec<f64>> =
        dataset.profiles.iter().map(|p| design_row(p, bins, dirs)).collect();
    let scaler = Scaler::fit(&rows)?;
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.forward_vec(r)).collect();
    let pca = pca_fit(&scaled, cfg.components)?;
    let projected: Vec<Vec<f64>> = scaled
        .iter()
        .map(|r| pca_project(&pca, r))
        .collect::<Result<_>>()?;
    let selection = select_k(&projected, &cfg.k_grid, seed, &cfg.em)?;

    let micro_dims = 2 * dataset.altitude_count();
    let pipeline = GmmPipeline {
        scaler,
        pca,
        gmm: selection.gmm,
        condition_layout: ConditionLayout {
            micro_dims,
            macro_u: micro_dims,
            macro_v: micro_dims + 1,
        },
        bins: bins.clone(),
        dirs: dirs.clone(),
        altitudes: dataset.altitudes.clone(),
    };
    Ok(GmmFitReport {
        pipeline,
        chosen_k: selection.chosen_k,
        bic_curve: selection.bic_curve,
    })
}

impl GmmPipeline {
    /// Reconstruct one mixture draw to physical space and decode its label.
    fn decode(&self, y: &[f64]) -> Result<WindProfile> {
        let standardized = pca_reconstruct(&self.pca, y)?;
        let x = self.scaler.inverse_vec(&standardized);
        let mu = x[self.condition_layout.macro_u];
        let mv = x[self.condition_layout.macro_v];
        let condition = decode_condition_uv(mu, mv, &self.bins, &self.dirs)?;
        Ok(WindProfile::from_flat(&x[..self.condition_layout.micro_dims], condition))
    }

    /// Draw `n` joint samples, each labeled by its decoded macro elements.
    pub fn sample_unconditional(&self, n: usize, seed: u64) -> Result<Vec<WindProfile>> {
        let f = sampler_factors(&self.gmm)?;
        (0..n)
            .map(|i| {
                let y = draw_one(&self.gmm, &f, &mut rng_for(seed, i as u64));
                self.decode(&y)
            })
            .collect()
    }

    /// Rejection-sample profiles whose decoded condition equals `condition`.
    ///
    /// Stops at `n` accepted samples or after `max_draws` draws, whichever
    /// comes first; zero acceptances at exhaustion is a no-mass error.
    pub fn conditional_sample(
        &self,
        condition: ConditionLabel,
        n: usize,
        seed: u64,
        max_draws: u64,
    ) -> Result<ConditionalDraw> {
        if max_draws < n as u64 {
            return Err(Error::InvalidInput(format!(
                "max_draws {max_draws} is smaller than the requested sample count {n}"
            )));
        }
        let f = sampler_factors(&self.gmm)?;
        let mut profiles = Vec::with_capacity(n);
        let mut draws: u64 = 0;
        let mut stream: u64 = 0;
        const CHUNK: u64 = 4096;
        while profiles.len() < n && draws < max_draws {
            let mut rng = rng_for(seed, stream);
            stream += 1;
            let budget = CHUNK.min(max_draws - draws);
            for _ in 0..budget {
                draws += 1;
                let y = draw_one(&self.gmm, &f, &mut rng);
                let profile = self.decode(&y)?;
                if profile.condition == condition {
                    profiles.push(profile);
                    if profiles.len() == n {
                        break;
                    }
                }
            }
        }
        if profiles.is_empty() {
            return Err(Error::NoConditionMass {
                condition: condition.display(&self.dirs),
                draws,
            });
        }
        let acceptance_rate = profiles.len() as f64 / draws as f64;
        Ok(ConditionalDraw { profiles, draws, acceptance_rate })
    }

    /// Serialize the pipeline as a self-describing JSON artifact.
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let artifact = Artifact { version: ARTIFACT_VERSION, kind: "gmm".into(), pipeline: self.clone() };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &artifact)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let artifact: Artifact = serde_json::from_reader(std::io::BufReader::new(file))?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported artifact version {}",
                artifact.version
            )));
        }
        if artifact.kind != "gmm" {
            return Err(Error::Checkpoint(format!(
                "expected a gmm artifact, found `{}`",
                artifact.kind
            )));
        }
        Ok(artifact.pipeline)
    }
}

#[derive(Serialize, Deserialize)]
struct Artifact {
    version: u32,
    kind: String,
    pipeline: GmmPipeline,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    /// Identity PCA over d dims with zero means.
    fn identity_pca(d: usize) -> PcaModel {
        let components = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        PcaModel {
            components,
            column_means: vec![0.0; d],
            explained_variance_ratio: vec![1.0 / d as f64; d],
        }
    }

    fn identity_scaler(d: usize) -> Scaler {
        Scaler { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    /// Hand-built joint over [u_1, v_1, macro_u, macro_v]: two components
    /// separated by their macro elements. Micro and macro blocks are
    /// independent within each component, so the analytic conditional mean
    /// of accepted micro samples is exactly the component's micro mean.
    fn two_component_pipeline(sigma: f64) -> GmmPipeline {
        let dirs = DirectionSet::compass16();
        let gmm = Gmm {
            weights: vec![0.6, 0.4],
            means: vec![
                DVector::from_column_slice(&[1.5, -0.5, 1.0, 0.0]),
                DVector::from_column_slice(&[-3.0, 2.0, -7.0, 0.0]),
            ],
            covariances: vec![DMatrix::identity(4, 4) * sigma * sigma; 2],
        };
        GmmPipeline {
            scaler: identity_scaler(4),
            pca: identity_pca(4),
            gmm,
            condition_layout: ConditionLayout { micro_dims: 2, macro_u: 2, macro_v: 3 },
            bins: SpeedBins::reference(),
            dirs,
            altitudes: vec![100.0],
        }
    }

    #[test]
    fn all_mass_on_one_label_accepts_everything() {
        let mut pipeline = two_component_pipeline(1e-4);
        pipeline.gmm.weights = vec![1.0, 0.0];
        let e = pipeline.dirs.index_of("E").unwrap();
        let cond = ConditionLabel::new(0, e);
        let draw = pipeline.conditional_sample(cond, 500, 7, 10_000).unwrap();
        assert_eq!(draw.acceptance_rate, 1.0);
        assert_eq!(draw.profiles.len(), 500);
    }

    #[test]
    fn accepted_means_match_analytic_conditional() {
        let pipeline = two_component_pipeline(0.2);
        let e = pipeline.dirs.index_of("E").unwrap();
        let cond = ConditionLabel::new(0, e);
        let draw = pipeline
            .conditional_sample(cond, 50_000, 11, DEFAULT_MAX_DRAWS)
            .unwrap();
        assert_eq!(draw.profiles.len(), 50_000);
        let n = draw.profiles.len() as f64;
        let mean_u: f64 = draw.profiles.iter().map(|p| p.u[0]).sum::<f64>() / n;
        let mean_v: f64 = draw.profiles.iter().map(|p| p.v[0]).sum::<f64>() / n;
        // Only component 0 has macro mass near (bin 0, E); its micro mean is
        // (1.5, -0.5) and micro ⊥ macro inside the component.
        assert!((mean_u - 1.5).abs() < 0.05, "mean_u {mean_u}");
        assert!((mean_v + 0.5).abs() < 0.05, "mean_v {mean_v}");
        // Every accepted profile re-encodes to the requested label.
        assert!(draw.profiles.iter().all(|p| p.condition == cond));
    }

    #[test]
    fn zero_mass_condition_raises_no_mass_error() {
        let pipeline = two_component_pipeline(0.2);
        let n_tok = pipeline.dirs.index_of("N").unwrap();
        // Bin 3 (>= 8.05 m/s) toward N: both components are tens of sigmas away.
        let cond = ConditionLabel::new(3, n_tok);
        match pipeline.conditional_sample(cond, 10, 3, 50_000) {
            Err(Error::NoConditionMass { condition, draws }) => {
                assert_eq!(draws, 50_000);
                assert!(condition.contains("N:3"), "{condition}");
            }
            other => panic!("expected NoConditionMass, got {other:?}"),
        }
    }

    #[test]
    fn artifact_round_trips_through_json() {
        let pipeline = two_component_pipeline(0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmm.json");
        pipeline.save_json(&path).unwrap();
        let back = GmmPipeline::load_json(&path).unwrap();
        assert_eq!(back, pipeline);
    }

    #[test]
    fn reference_design_matrix_concentrates_variance_in_few_components() {
        // Qualitative reproduction of the explained-variance elbow: on the
        // 96-dimensional joint design matrix of the synthetic campaign,
        // seven components capture most of the variance and the cumulative
        // curve is non-decreasing.
        use crate::data::{synth_generate, SynthConfig};
        use crate::stats::pca_fit;
        let bins = SpeedBins::reference();
        let dirs = DirectionSet::compass16();
        let cfg = SynthConfig::four_regime_reference(800, 19);
        let ds = synth_generate(&cfg, &bins, &dirs).unwrap();
        let rows: Vec<Vec<f64>> =
            ds.profiles.iter().map(|p| design_row(p, &bins, &dirs)).collect();
        assert_eq!(rows[0].len(), 96);
        let scaler = Scaler::fit(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.forward_vec(r)).collect();
        let mut last = 0.0;
        for c in [1usize, 3, 5, 7] {
            let model = pca_fit(&scaled, c).unwrap();
            let cum = model.cumulative_explained();
            assert!(cum + 1e-12 >= last, "cumulative curve decreased at {c}");
            last = cum;
        }
        assert!(last > 0.9, "7 components explain only {last:.3}");
    }

    #[test]
    fn fitted_pipeline_samples_decode_to_valid_labels() {
        use crate::data::{synth_generate, SynthConfig};
        let bins = SpeedBins::reference();
        let dirs = DirectionSet::compass16();
        let mut cfg = SynthConfig::four_regime_reference(400, 5);
        cfg.altitude_count = 8;
        let ds = synth_generate(&cfg, &bins, &dirs).unwrap();
        let train_cfg = GmmTrainConfig {
            components: 5,
            k_grid: vec![2, 4],
            em: EmOptions { tol: 1e-4, max_iter: 60, restarts: 1 },
        };
        let report = fit_gmm_pipeline(&ds, &bins, &dirs, &train_cfg, 1).unwrap();
        assert_eq!(report.bic_curve.len(), 2);
        let samples = report.pipeline.sample_unconditional(50, 2).unwrap();
        assert_eq!(samples.len(), 50);
        for p in &samples {
            assert_eq!(p.altitude_count(), 8);
            assert!(p.condition.speed_bin < bins.len());
            assert!(p.condition.direction < dirs.len());
        }
    }
}
