//! Evaluation harness: per-altitude symmetrized KL curves, conditional
//! mean/std profiles, and the condition-holdout K-fold generalization grid.

mod report;

pub use report::emit_report;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{split_holdout, ConditionLabel, Dataset, DirectionSet, SpeedBins, WindProfile};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm_pipeline, GmmPipeline, GmmTrainConfig};
use crate::seed::{derive_seed, fnv1a};
use crate::stats::{profile_stats, symmetrized_kl, ProfileStats};

/// Real-sample count below which a condition is flagged low-support.
pub const LOW_SUPPORT_THRESHOLD: usize = 30;

/// A KL estimate that may be absent (model produced no usable samples).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlValue {
    Value(f64),
    Missing,
}

impl KlValue {
    pub fn as_option(&self) -> Option<f64> {
        match self {
            KlValue::Value(v) => Some(*v),
            KlValue::Missing => None,
        }
    }
}

impl Serialize for KlValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KlValue::Value(v) => s.serialize_f64(*v),
            KlValue::Missing => s.serialize_str("missing"),
        }
    }
}

impl<'de> Deserialize<'de> for KlValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(KlValue::Value(v)),
            Raw::Text(t) if t == "missing" => Ok(KlValue::Missing),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected KL token `{t}`"))),
        }
    }
}

/// Anything that generates labeled profiles for a requested condition.
pub trait ConditionalSampler {
    fn sample(&self, condition: ConditionLabel, n: usize, seed: u64) -> Result<Vec<WindProfile>>;

    /// Unconditional generation. The default draws conditions from the
    /// empirical label pool and samples each; joint models override this.
    fn sample_unconditional(
        &self,
        label_pool: &[ConditionLabel],
        n: usize,
        seed: u64,
    ) -> Result<Vec<WindProfile>> {
        use rand::RngExt;
        if label_pool.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = crate::seed::rng_for(seed, 0);
        let mut wanted: std::collections::BTreeMap<ConditionLabel, usize> = Default::default();
        for _ in 0..n {
            let label = label_pool[rng.random_range(0..label_pool.len())];
            *wanted.entry(label).or_default() += 1;
        }
        let mut out = Vec::with_capacity(n);
        for (i, (label, count)) in wanted.into_iter().enumerate() {
            match self.sample(label, count, derive_seed(seed, 1 + i as u64)) {
                Ok(mut profiles) => out.append(&mut profiles),
                Err(Error::NoConditionMass { condition, .. }) => {
                    log::warn!("unconditional pool: no mass on {condition}; skipping");
                }
                Err(err) => return Err(err),
            }
        }
        Ok(out)
    }
}

impl ConditionalSampler for Checkpoint {
    fn sample(&self, condition: ConditionLabel, n: usize, seed: u64) -> Result<Vec<WindProfile>> {
        self.sample_profiles(condition, n, seed)
    }
}

/// Mixture pipeline wrapped with a rejection budget.
pub struct GmmConditionalSampler {
    pub pipeline: GmmPipeline,
    pub max_draws: u64,
}

impl ConditionalSampler for GmmConditionalSampler {
    fn sample(&self, condition: ConditionLabel, n: usize, seed: u64) -> Result<Vec<WindProfile>> {
        Ok(self
            .pipeline
            .conditional_sample(condition, n, seed, self.max_draws)?
            .profiles)
    }

    fn sample_unconditional(
        &self,
        _label_pool: &[ConditionLabel],
        n: usize,
        seed: u64,
    ) -> Result<Vec<WindProfile>> {
        self.pipeline.sample_unconditional(n, seed)
    }
}

/// Testing oracle that replays stored profiles for a condition, cycling
/// deterministically. Requesting exactly the stored count returns the
/// stored set verbatim.
pub struct ReplaySampler {
    pub profiles: Vec<WindProfile>,
}

impl ConditionalSampler for ReplaySampler {
    fn sample(&self, condition: ConditionLabel, n: usize, _seed: u64) -> Result<Vec<WindProfile>> {
        let matching: Vec<&WindProfile> =
            self.profiles.iter().filter(|p| p.condition == condition).collect();
        if matching.is_empty() {
            return Err(Error::NoConditionMass {
                condition: format!("{}:{}", condition.direction, condition.speed_bin),
                draws: 0,
            });
        }
        Ok(matching.iter().cycle().take(n).map(|p| (*p).clone()).collect())
    }
}

/// A named model registered for evaluation.
pub struct EvalModel<'a> {
    pub name: String,
    pub sampler: &'a dyn ConditionalSampler,
}

/// Per-altitude symmetrized KL between real and generated (u, v) points.
pub fn kl_by_altitude(
    real: &Dataset,
    generated: &[WindProfile],
    k: usize,
) -> Result<Vec<f64>> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = real.altitude_count();
    if generated.iter().any(|p| p.altitude_count() != a) {
        return Err(Error::DimMismatch {
            context: "kl_by_altitude",
            expected: a,
            actual: generated[0].altitude_count(),
        });
    }
    (0..a)
        .map(|alt| {
            let p: Vec<Vec<f64>> =
                real.profiles.iter().map(|pr| vec![pr.u[alt], pr.v[alt]]).collect();
            let q: Vec<Vec<f64>> = generated.iter().map(|pr| vec![pr.u[alt], pr.v[alt]]).collect();
            symmetrized_kl(&p, &q, k)
        })
        .collect()
}

/// One conditional evaluation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalCell {
    pub model: String,
    pub speed_bin: usize,
    pub direction: String,
    pub n_real: usize,
    pub n_generated: usize,
    pub low_support: bool,
    pub real: Option<ProfileStats>,
    pub generated: Option<ProfileStats>,
    pub kl_by_altitude: Vec<KlValue>,
}

/// Generate per-condition samples and compare their profile statistics and
/// per-altitude KL against the real data. A no-mass outcome is recorded as
/// a missing cell, not an error.
pub fn conditional_report(
    models: &[EvalModel],
    dataset: &Dataset,
    conditions: &[ConditionLabel],
    dirs: &DirectionSet,
    n_per_condition: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<ConditionalCell>> {
    let mut cells = Vec::new();
    for model in models {
        for (ci, &label) in conditions.iter().enumerate() {
            let real_refs = dataset.with_label(label);
            let n_real = real_refs.len();
            let low_support = n_real < LOW_SUPPORT_THRESHOLD;
            let real = if n_real > 0 { Some(profile_stats(&real_refs)?) } else { None };

            let cell_seed = derive_seed(seed, fnv1a(format!("{}/{ci}", model.name).as_bytes()));
            let generated = match model.sampler.sample(label, n_per_condition, cell_seed) {
                Ok(profiles) => Some(profiles),
                Err(Error::NoConditionMass { .. }) => None,
                Err(err) => return Err(err),
            };

            let (gen_stats, kl, n_generated) = match &generated {
                Some(profiles) if !profiles.is_empty() => {
                    let refs: Vec<&WindProfile> = profiles.iter().collect();
                    let stats = Some(profile_stats(&refs)?);
                    let kl = if n_real > k && profiles.len() > k {
                        let real_ds = Dataset {
                            profiles: real_refs.iter().map(|p| (*p).clone()).collect(),
                            altitudes: dataset.altitudes.clone(),
                            scaler: None,
                        };
                        kl_by_altitude(&real_ds, profiles, k)?
                            .into_iter()
                            .map(KlValue::Value)
                            .collect()
                    } else {
                        vec![KlValue::Missing; dataset.altitude_count()]
                    };
                    (stats, kl, profiles.len())
                }
                _ => (None, vec![KlValue::Missing; dataset.altitude_count()], 0),
            };

            cells.push(ConditionalCell {
                model: model.name.clone(),
                speed_bin: label.speed_bin,
                direction: dirs.token(label.direction).to_string(),
                n_real,
                n_generated,
                low_support,
                real,
                generated: gen_stats,
                kl_by_altitude: kl,
            });
        }
    }
    Ok(cells)
}

/// Trains a model from scratch on a training split.
pub trait ModelTrainer {
    fn name(&self) -> String;
    fn train(&self, train: &Dataset, seed: u64) -> Result<Box<dyn ConditionalSampler>>;
}

/// K-fold trainer for the mixture pipeline.
pub struct GmmTrainer {
    pub bins: SpeedBins,
    pub dirs: DirectionSet,
    pub cfg: GmmTrainConfig,
    pub max_draws: u64,
}

impl ModelTrainer for GmmTrainer {
    fn name(&self) -> String {
        "gmm".into()
    }

    fn train(&self, train: &Dataset, seed: u64) -> Result<Box<dyn ConditionalSampler>> {
        let report = fit_gmm_pipeline(train, &self.bins, &self.dirs, &self.cfg, seed)?;
        Ok(Box::new(GmmConditionalSampler {
            pipeline: report.pipeline,
            max_draws: self.max_draws,
        }))
    }
}

/// K-fold trainer for the diffusion / flow models.
pub struct DgmTrainer {
    pub kind: crate::checkpoint::ModelKind,
    pub bins: SpeedBins,
    pub dirs: DirectionSet,
    pub cfg: crate::checkpoint::DgmTrainConfig,
}

impl ModelTrainer for DgmTrainer {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn train(&self, train: &Dataset, seed: u64) -> Result<Box<dyn ConditionalSampler>> {
        let (checkpoint, _) = match self.kind {
            crate::checkpoint::ModelKind::Ddpm => {
                crate::checkpoint::train_ddpm(train, &self.bins, &self.dirs, &self.cfg, seed)?
            }
            crate::checkpoint::ModelKind::Fm => {
                crate::checkpoint::train_fm(train, &self.bins, &self.dirs, &self.cfg, seed)?
            }
        };
        Ok(Box::new(checkpoint))
    }
}

/// Outcome of one K-fold cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "detail")]
pub enum FoldStatus {
    Ok,
    /// Model produced no samples for the held-out condition.
    Missing,
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KfoldCell {
    pub model: String,
    pub speed_bin: usize,
    pub direction: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_generated: usize,
    pub status: FoldStatus,
    /// Symmetrized KL of altitude-averaged (u, v): generated vs held out.
    pub kl: KlValue,
    /// True when no held-out profile entered the fold's training set.
    pub label_audit_passed: bool,
}

fn mean_uv_points(profiles: &[WindProfile]) -> Vec<Vec<f64>> {
    profiles
        .iter()
        .map(|p| {
            let (u, v) = p.mean_uv();
            vec![u, v]
        })
        .collect()
}

/// Run the condition-holdout grid: for every label, retrain from scratch on
/// the remaining data, generate as many samples as were held out, and score
/// the altitude-averaged (u, v) distribution against the held-out set.
/// Fold seeds derive from a hash of the label, so grid order is irrelevant.
pub fn kfold_generalization(
    trainer: &dyn ModelTrainer,
    dataset: &Dataset,
    grid: &[ConditionLabel],
    dirs: &DirectionSet,
    k: usize,
    seed: u64,
) -> Result<Vec<KfoldCell>> {
    let mut cells = Vec::with_capacity(grid.len());
    for &label in grid {
        let split = split_holdout(dataset, label);
        let audit_passed = split.train.profiles.iter().all(|p| p.condition != label);
        let mut cell = KfoldCell {
            model: trainer.name(),
            speed_bin: label.speed_bin,
            direction: dirs.token(label.direction).to_string(),
            n_train: split.train.len(),
            n_test: split.test.len(),
            n_generated: 0,
            status: FoldStatus::Ok,
            kl: KlValue::Missing,
            label_audit_passed: audit_passed,
        };
        if !audit_passed {
            cell.status = FoldStatus::Failed("label audit failed".into());
            cells.push(cell);
            continue;
        }
        if split.holdout_missing || split.train.is_empty() {
            cell.status = FoldStatus::Failed("degenerate split (empty train or test)".into());
            cells.push(cell);
            continue;
        }

        let fold_seed = derive_seed(
            seed,
            fnv1a(format!("{}:{}", label.speed_bin, label.direction).as_bytes()),
        );
        let model = match trainer.train(&split.train, fold_seed) {
            Ok(m) => m,
            Err(err) => {
                log::warn!("fold {}:{} training failed: {err}", cell.direction, cell.speed_bin);
                cell.status = FoldStatus::Failed(err.to_string());
                cells.push(cell);
                continue;
            }
        };
        let generated = match model.sample(label, split.test.len(), derive_seed(fold_seed, 1)) {
            Ok(p) => p,
            Err(Error::NoConditionMass { .. }) => {
                cell.status = FoldStatus::Missing;
                cells.push(cell);
                continue;
            }
            Err(err) => {
                cell.status = FoldStatus::Failed(err.to_string());
                cells.push(cell);
                continue;
            }
        };
        cell.n_generated = generated.len();
        if generated.len() > k && split.test.len() > k {
            let kl = symmetrized_kl(
                &mean_uv_points(&split.test.profiles),
                &mean_uv_points(&generated),
                k,
            )?;
            cell.kl = KlValue::Value(kl);
        }
        cells.push(cell);
    }
    Ok(cells)
}

/// Altitude-averaged (u, v) scatter for one model (or the data itself).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BivariateSet {
    pub model: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlCurve {
    pub model: String,
    pub values: Vec<KlValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub version: String,
    pub seed: u64,
    pub k_neighbors: usize,
    /// Free-form configuration notes, e.g. per-model hyperparameters.
    pub configs: Vec<(String, String)>,
}

/// Everything the evaluation protocol produces, ready for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub altitudes: Vec<f64>,
    pub kl_by_altitude: Vec<KlCurve>,
    pub conditional: Vec<ConditionalCell>,
    pub kfold: Vec<KfoldCell>,
    pub bivariate: Vec<BivariateSet>,
    pub metadata: RunMetadata,
}

impl EvalReport {
    pub fn empty(altitudes: Vec<f64>, metadata: RunMetadata) -> Self {
        Self {
            altitudes,
            kl_by_altitude: Vec::new(),
            conditional: Vec::new(),
            kfold: Vec::new(),
            bivariate: Vec::new(),
            metadata,
        }
    }
}

/// Evaluation driver options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_unconditional: usize,
    pub n_per_condition: usize,
    pub k_neighbors: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_unconditional: 2_000, n_per_condition: 400, k_neighbors: 1, seed: 0 }
    }
}

/// Full evaluation of several models against one dataset: unconditional KL
/// curves, bivariate scatters, and the conditional report over every label
/// present in the data.
pub fn evaluate(
    models: &[EvalModel],
    dataset: &Dataset,
    dirs: &DirectionSet,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let metadata = RunMetadata {
        schema_version: 1,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.seed,
        k_neighbors: opts.k_neighbors,
        configs: Vec::new(),
    };
    let mut report = EvalReport::empty(dataset.altitudes.clone(), metadata);

    report
        .bivariate
        .push(BivariateSet { model: "data".into(), points: mean_uv_points(&dataset.profiles).iter().map(|p| (p[0], p[1])).collect() });

    let label_pool: Vec<ConditionLabel> = dataset.profiles.iter().map(|p| p.condition).collect();
    for (mi, model) in models.iter().enumerate() {
        let pool = model.sampler.sample_unconditional(
            &label_pool,
            opts.n_unconditional,
            derive_seed(opts.seed, 1000 + mi as u64),
        )?;
        let values = if pool.len() > opts.k_neighbors {
            kl_by_altitude(dataset, &pool, opts.k_neighbors)?
                .into_iter()
                .map(KlValue::Value)
                .collect()
        } else {
            vec![KlValue::Missing; dataset.altitude_count()]
        };
        report.kl_by_altitude.push(KlCurve { model: model.name.clone(), values });
        report.bivariate.push(BivariateSet {
            model: model.name.clone(),
            points: mean_uv_points(&pool).iter().map(|p| (p[0], p[1])).collect(),
        });
    }

    let labels = dataset.labels();
    report.conditional = conditional_report(
        models,
        dataset,
        &labels,
        dirs,
        opts.n_per_condition,
        opts.k_neighbors,
        opts.seed,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::seed::rng_from;
    use rand::RngExt;

    fn small_synth(n: usize, seed: u64) -> (Dataset, SpeedBins, DirectionSet) {
        let bins = SpeedBins::reference();
        let dirs = DirectionSet::compass16();
        let mut cfg = SynthConfig::four_regime_reference(n, seed);
        cfg.altitude_count = 5;
        (synth_generate(&cfg, &bins, &dirs).unwrap(), bins, dirs)
    }

    fn bootstrap(dataset: &Dataset, n: usize, seed: u64) -> Vec<WindProfile> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|_| dataset.profiles[rng.random_range(0..dataset.len())].clone())
            .collect()
    }

    #[test]
    fn bootstrap_resample_scores_near_zero_everywhere() {
        let (ds, _, _) = small_synth(600, 1);
        let generated = bootstrap(&ds, 600, 2);
        let kl = kl_by_altitude(&ds, &generated, 1).unwrap();
        assert_eq!(kl.len(), 5);
        for (alt, v) in kl.iter().enumerate() {
            assert!(*v < 0.1, "altitude {alt}: kl {v}");
        }
    }

    #[test]
    fn localized_shift_dominates_its_altitude() {
        let (ds, _, _) = small_synth(600, 3);
        let mut generated = bootstrap(&ds, 600, 4);
        for p in &mut generated {
            p.u[2] += 5.0;
        }
        let kl = kl_by_altitude(&ds, &generated, 1).unwrap();
        let spiked = kl[2];
        for (alt, v) in kl.iter().enumerate() {
            if alt != 2 {
                assert!(spiked > *v, "altitude {alt}: {v} vs spiked {spiked}");
            }
        }
    }

    #[test]
    fn single_altitude_dataset_gives_length_one_vector() {
        let (mut ds, _, _) = small_synth(100, 5);
        ds.altitudes = vec![20.0];
        for p in &mut ds.profiles {
            p.u.truncate(1);
            p.v.truncate(1);
        }
        let generated = bootstrap(&ds, 100, 6);
        let kl = kl_by_altitude(&ds, &generated, 1).unwrap();
        assert_eq!(kl.len(), 1);
    }

    #[test]
    fn replay_model_reproduces_real_statistics_exactly() {
        let (ds, _, dirs) = small_synth(500, 7);
        let replay = ReplaySampler { profiles: ds.profiles.clone() };
        let models = vec![EvalModel { name: "replay".into(), sampler: &replay }];
        // Request exactly the per-label count so the replay returns each
        // real sample once: the statistics must be identical.
        let labels: Vec<ConditionLabel> = ds
            .labels()
            .into_iter()
            .filter(|l| ds.with_label(*l).len() >= 30)
            .collect();
        assert!(!labels.is_empty());
        for &label in &labels {
            let n = ds.with_label(label).len();
            let cells = conditional_report(&models, &ds, &[label], &dirs, n, 1, 9).unwrap();
            let cell = &cells[0];
            assert!(!cell.low_support);
            let (real, generated) =
                (cell.real.as_ref().unwrap(), cell.generated.as_ref().unwrap());
            for (rm, gm) in real.mean.iter().zip(&generated.mean) {
                assert!((rm - gm).abs() < 1e-12, "real {rm} vs generated {gm}");
            }
            for (rs, gs) in real.std.iter().zip(&generated.std) {
                assert!((rs - gs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_single_regime_replay_has_zero_std() {
        use crate::data::Regime;
        let bins = SpeedBins::reference();
        let dirs = DirectionSet::compass16();
        let cfg = SynthConfig {
            n_samples: 60,
            regimes: vec![Regime {
                weight: 1.0,
                u_star: 0.3,
                direction_mean: 1.2,
                direction_spread: 0.0,
                z0: 0.1,
            }],
            noise_std: 0.0,
            altitude_count: 6,
            altitude_range: (20.0, 250.0),
            seed: 8,
        };
        let ds = synth_generate(&cfg, &bins, &dirs).unwrap();
        let replay = ReplaySampler { profiles: ds.profiles.clone() };
        let models = vec![EvalModel { name: "replay".into(), sampler: &replay }];
        let label = ds.profiles[0].condition;
        let cells = conditional_report(&models, &ds, &[label], &dirs, 60, 1, 3).unwrap();
        let generated = cells[0].generated.as_ref().unwrap();
        assert!(generated.std.iter().all(|&s| s < 1e-12));
    }

    #[test]
    fn degenerate_single_label_fold_is_marked_failed() {
        let (mut ds, _, dirs) = small_synth(50, 11);
        let only = ds.profiles[0].condition;
        for p in &mut ds.profiles {
            p.condition = only;
        }
        let trainer = GmmTrainer {
            bins: SpeedBins::reference(),
            dirs: dirs.clone(),
            cfg: GmmTrainConfig { components: 2, k_grid: vec![1], ..Default::default() },
            max_draws: 10_000,
        };
        let cells = kfold_generalization(&trainer, &ds, &[only], &dirs, 1, 13).unwrap();
        assert_eq!(cells.len(), 1);
        assert!(matches!(cells[0].status, FoldStatus::Failed(_)));
    }

    #[test]
    fn replay_trainer_scores_below_point_one_in_every_fold() {
        let (ds, _, dirs) = small_synth(1200, 17);
        // Cheating oracle: replays the full dataset regardless of split.
        struct ReplayTrainer(Dataset);
        impl ModelTrainer for ReplayTrainer {
            fn name(&self) -> String {
                "replay".into()
            }
            fn train(&self, _train: &Dataset, _seed: u64) -> Result<Box<dyn ConditionalSampler>> {
                Ok(Box::new(ReplaySampler { profiles: self.0.profiles.clone() }))
            }
        }
        let grid: Vec<ConditionLabel> = ds
            .labels()
            .into_iter()
            .filter(|l| ds.with_label(*l).len() >= 40)
            .collect();
        assert!(grid.len() >= 4, "grid too small: {}", grid.len());
        let trainer = ReplayTrainer(ds.clone());
        let cells = kfold_generalization(&trainer, &ds, &grid, &dirs, 1, 19).unwrap();
        for cell in &cells {
            assert!(cell.label_audit_passed);
            assert_eq!(cell.status, FoldStatus::Ok);
            match cell.kl {
                KlValue::Value(v) => assert!(v < 0.1, "{}:{} kl {v}", cell.direction, cell.speed_bin),
                KlValue::Missing => panic!("unexpected missing cell"),
            }
        }
    }
}
