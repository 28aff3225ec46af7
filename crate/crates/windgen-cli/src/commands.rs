//! Subcommand implementations. Each command is a thin composition of
//! library operations, writes everything under the output directory, and
//! records a manifest with the exact configuration it ran.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use windgen::checkpoint::Checkpoint;
use windgen::data::{
    load_dataset, write_dataset_csv, write_profiles_csv, ConditionLabel, CsvSchema, Dataset,
    DirectionSet, SpeedBins, synth_generate,
};
use windgen::eval::{
    emit_report, evaluate, kfold_generalization, DgmTrainer, EvalModel, EvalOptions, EvalReport,
    GmmConditionalSampler, GmmTrainer, ModelTrainer, RunMetadata,
};
use windgen::gmm::{fit_gmm_pipeline, GmmPipeline};
use windgen::seed::fnv1a;

use crate::config::{ModelKindSection, RunConfig};

/// Context shared by every command.
pub struct CommandCtx {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub config_text: Option<String>,
    pub argv: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    config_hash: String,
    argv: &'a [String],
    config: &'a str,
}

impl CommandCtx {
    fn effective_seed(&self, config_seed: u64) -> u64 {
        self.seed.unwrap_or(config_seed)
    }

    fn write_manifest(&self, command: &str, seed: u64) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let config = self.config_text.as_deref().unwrap_or("");
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: format!("{:016x}", fnv1a(config.as_bytes())),
            argv: &self.argv,
            config,
        };
        let file = std::fs::File::create(self.out_dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
        Ok(())
    }
}

fn reference_vocab() -> (SpeedBins, DirectionSet) {
    (SpeedBins::reference(), DirectionSet::compass16())
}

/// Load the configured data source.
fn load_source(config: &RunConfig, seed: u64) -> anyhow::Result<Dataset> {
    let (bins, dirs) = reference_vocab();
    if let Some(section) = &config.dataset {
        let schema = CsvSchema { altitude_range: section.altitude_range, ..CsvSchema::default() };
        let report = load_dataset(Path::new(&section.path), &schema, &bins, &dirs)
            .with_context(|| format!("loading dataset `{}`", section.path))?;
        println!(
            "loaded {} profiles at {} altitudes ({} rows dropped for non-finite values)",
            report.dataset.len(),
            report.dataset.altitude_count(),
            report.dropped_rows
        );
        Ok(report.dataset)
    } else {
        let sc = config.synth_config(seed)?;
        let ds = synth_generate(&sc, &bins, &dirs)?;
        println!("generated {} synthetic profiles at {} altitudes", ds.len(), ds.altitude_count());
        Ok(ds)
    }
}

/// Parse a `DIRECTION:BIN` condition such as `SW:2`.
pub fn parse_condition(text: &str, bins: &SpeedBins, dirs: &DirectionSet) -> anyhow::Result<ConditionLabel> {
    let (token, bin_text) = text
        .split_once(':')
        .ok_or_else(|| anyhow::anyhow!("condition must be DIRECTION:SPEED_BIN, e.g. SW:2"))?;
    let direction = dirs
        .index_of(token.trim())
        .ok_or_else(|| anyhow::anyhow!("unknown compass token `{token}`"))?;
    let speed_bin: usize = bin_text.trim().parse().context("speed bin must be an index")?;
    if speed_bin >= bins.len() {
        bail!("speed bin {speed_bin} out of range 0..{}", bins.len());
    }
    Ok(ConditionLabel::new(speed_bin, direction))
}

pub fn cmd_synth(ctx: &CommandCtx, config: &RunConfig) -> anyhow::Result<()> {
    let seed = ctx.effective_seed(config.seed);
    if config.synth.is_none() {
        bail!("synth command requires a [synth] section in the config");
    }
    let (bins, dirs) = reference_vocab();
    let dataset = load_source(config, seed)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let path = ctx.out_dir.join("dataset.csv");
    write_dataset_csv(&dataset, &path, &bins, &dirs)?;
    ctx.write_manifest("synth", seed)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_train(ctx: &CommandCtx, config: &RunConfig) -> anyhow::Result<()> {
    let seed = ctx.effective_seed(config.seed);
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("train requires a [model] section"))?;
    let (bins, dirs) = reference_vocab();
    let dataset = load_source(config, seed)?;
    std::fs::create_dir_all(&ctx.out_dir)?;

    match model.kind {
        ModelKindSection::Gmm => {
            let report = fit_gmm_pipeline(&dataset, &bins, &dirs, &model.gmm.to_train_config(), seed)?;
            let path = ctx.out_dir.join("gmm.json");
            report.pipeline.save_json(&path)?;
            let mut curve = String::from("k,bic\n");
            for point in &report.bic_curve {
                let bic = point.bic.map_or("missing".to_string(), |b| b.to_string());
                curve.push_str(&format!("{},{}\n", point.k, bic));
            }
            std::fs::write(ctx.out_dir.join("bic_curve.csv"), curve)?;
            println!("selected k = {}; wrote {}", report.chosen_k, path.display());
        }
        ModelKindSection::Ddpm | ModelKindSection::Fm => {
            let cfg = model.dgm.to_train_config();
            let (checkpoint, losses) = match model.kind {
                ModelKindSection::Ddpm => windgen::checkpoint::train_ddpm(&dataset, &bins, &dirs, &cfg, seed)?,
                _ => windgen::checkpoint::train_fm(&dataset, &bins, &dirs, &cfg, seed)?,
            };
            let name = match model.kind {
                ModelKindSection::Ddpm => "ddpm.ckpt",
                _ => "fm.ckpt",
            };
            let path = ctx.out_dir.join(name);
            checkpoint.save(&path)?;
            let mut trace = String::from("step,loss\n");
            for (i, loss) in losses.iter().enumerate() {
                trace.push_str(&format!("{},{}\n", i, loss));
            }
            std::fs::write(ctx.out_dir.join("loss_trace.csv"), trace)?;
            println!("trained {} steps; wrote {}", losses.len(), path.display());
        }
    }
    ctx.write_manifest("train", seed)
}

/// A loaded model artifact of any kind.
enum Artifact {
    Gmm(GmmPipeline),
    Dgm(Checkpoint),
}

fn load_artifact(path: &Path) -> anyhow::Result<Artifact> {
    let bytes = std::fs::read(path).with_context(|| format!("reading `{}`", path.display()))?;
    if bytes.starts_with(b"WGCK") {
        Ok(Artifact::Dgm(Checkpoint::from_bytes(&bytes)?))
    } else {
        Ok(Artifact::Gmm(GmmPipeline::load_json(path)?))
    }
}

pub fn cmd_sample(
    ctx: &CommandCtx,
    checkpoint: &Path,
    condition: &str,
    n: usize,
    max_draws: u64,
) -> anyhow::Result<()> {
    let seed = ctx.effective_seed(0);
    let artifact = load_artifact(checkpoint)?;
    std::fs::create_dir_all(&ctx.out_dir)?;
    let out_path = ctx.out_dir.join("samples.csv");
    match artifact {
        Artifact::Gmm(pipeline) => {
            let label = parse_condition(condition, &pipeline.bins, &pipeline.dirs)?;
            let draw = pipeline.conditional_sample(label, n, seed, max_draws)?;
            write_profiles_csv(&draw.profiles, &out_path, &pipeline.bins, &pipeline.dirs)?;
            println!(
                "accepted {} of {} requested samples (acceptance rate {:.3e})",
                draw.profiles.len(),
                n,
                draw.acceptance_rate
            );
        }
        Artifact::Dgm(checkpoint) => {
            let label = parse_condition(condition, &checkpoint.bins, &checkpoint.dirs)?;
            let profiles = checkpoint.sample_profiles(label, n, seed)?;
            write_profiles_csv(&profiles, &out_path, &checkpoint.bins, &checkpoint.dirs)?;
            println!("generated {} samples", profiles.len());
        }
    }
    ctx.write_manifest("sample", seed)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

pub fn cmd_eval(
    ctx: &CommandCtx,
    checkpoints: &[PathBuf],
    dataset_path: &Path,
    config: Option<&RunConfig>,
) -> anyhow::Result<()> {
    let default_config;
    let eval_section = match config {
        Some(c) => &c.eval,
        None => {
            default_config = crate::config::EvalSection::default();
            &default_config
        }
    };
    let seed = ctx.effective_seed(config.map_or(0, |c| c.seed));
    let (bins, dirs) = reference_vocab();
    let schema = CsvSchema::default();
    let report = load_dataset(dataset_path, &schema, &bins, &dirs)?;
    println!(
        "loaded {} profiles ({} rows dropped)",
        report.dataset.len(),
        report.dropped_rows
    );

    let artifacts: Vec<(String, Artifact)> = checkpoints
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".to_string());
            load_artifact(p).map(|a| (name, a))
        })
        .collect::<anyhow::Result<_>>()?;

    let max_draws = config.map_or(windgen::gmm::DEFAULT_MAX_DRAWS, |c| {
        c.model.as_ref().map_or(windgen::gmm::DEFAULT_MAX_DRAWS, |m| m.gmm.max_draws)
    });
    let samplers: Vec<(String, Box<dyn windgen::eval::ConditionalSampler>)> = artifacts
        .into_iter()
        .map(|(name, artifact)| -> (String, Box<dyn windgen::eval::ConditionalSampler>) {
            match artifact {
                Artifact::Gmm(pipeline) => {
                    (name, Box::new(GmmConditionalSampler { pipeline, max_draws }))
                }
                Artifact::Dgm(ck) => (name, Box::new(ck)),
            }
        })
        .collect();
    let models: Vec<EvalModel> = samplers
        .iter()
        .map(|(name, sampler)| EvalModel { name: name.clone(), sampler: sampler.as_ref() })
        .collect();

    let opts = EvalOptions {
        n_unconditional: eval_section.n_unconditional,
        n_per_condition: eval_section.n_per_condition,
        k_neighbors: eval_section.k_neighbors,
        seed,
    };
    let eval_report = evaluate(&models, &report.dataset, &dirs, &opts)?;
    emit_report(&eval_report, &ctx.out_dir)?;
    ctx.write_manifest("eval", seed)?;
    println!("wrote report files to {}", ctx.out_dir.display());
    Ok(())
}

pub fn cmd_kfold(ctx: &CommandCtx, config: &RunConfig) -> anyhow::Result<()> {
    let seed = ctx.effective_seed(config.seed);
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("kfold requires a [model] section"))?;
    let (bins, dirs) = reference_vocab();
    let dataset = load_source(config, seed)?;

    let mut grid = Vec::new();
    for &bin in &config.kfold.speed_bins {
        for token in &config.kfold.directions {
            let direction = dirs
                .index_of(token)
                .ok_or_else(|| anyhow::anyhow!("unknown compass token `{token}`"))?;
            grid.push(ConditionLabel::new(bin, direction));
        }
    }

    let trainer: Box<dyn ModelTrainer> = match model.kind {
        ModelKindSection::Gmm => Box::new(GmmTrainer {
            bins: bins.clone(),
            dirs: dirs.clone(),
            cfg: model.gmm.to_train_config(),
            max_draws: model.gmm.max_draws,
        }),
        ModelKindSection::Ddpm => Box::new(DgmTrainer {
            kind: windgen::checkpoint::ModelKind::Ddpm,
            bins: bins.clone(),
            dirs: dirs.clone(),
            cfg: model.dgm.to_train_config(),
        }),
        ModelKindSection::Fm => Box::new(DgmTrainer {
            kind: windgen::checkpoint::ModelKind::Fm,
            bins: bins.clone(),
            dirs: dirs.clone(),
            cfg: model.dgm.to_train_config(),
        }),
    };

    let cells = kfold_generalization(
        trainer.as_ref(),
        &dataset,
        &grid,
        &dirs,
        config.eval.k_neighbors,
        seed,
    )?;
    let metadata = RunMetadata {
        schema_version: 1,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        k_neighbors: config.eval.k_neighbors,
        configs: vec![("model".to_string(), format!("{:?}", model.kind))],
    };
    let mut report = EvalReport::empty(dataset.altitudes.clone(), metadata);
    report.kfold = cells;
    emit_report(&report, &ctx.out_dir)?;
    ctx.write_manifest("kfold", seed)?;
    println!("completed {} folds; wrote {}", report.kfold.len(), ctx.out_dir.display());
    Ok(())
}
