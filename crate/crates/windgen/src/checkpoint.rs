//! Trained-model bundles: network parameters plus everything needed to
//! turn latents back into labeled wind profiles.
//!
//! A checkpoint couples the U-Net with its noise schedule or flow config,
//! the training scaler, the condition vocabularies, and the altitude grid.
//! Files carry a versioned JSON header followed by the raw parameter block,
//! and serialize byte-identically for identical inputs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fit_scaler, ConditionLabel, Dataset, DirectionSet, Scaler, SpeedBins, WindProfile};
use crate::ddpm::{ddpm_sample_latents, ddpm_train_step, linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fm::{fm_sample_latents, fm_train_step, FlowConfig};
use crate::nn::{
    adam_step, crop_tail, pad_tail_replicate, read_params, tail_mask, write_params, AdamConfig,
    AdamState, Tensor, UNet1d, UNetConfig,
};
use crate::seed::{rng_for, derive_seed};

const MAGIC: &[u8; 4] = b"WGCK";
const VERSION: u32 = 1;

/// Which generative model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ddpm,
    Fm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Ddpm => f.write_str("ddpm"),
            ModelKind::Fm => f.write_str("fm"),
        }
    }
}

/// Diffusion schedule hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdpmHyperParams {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DdpmHyperParams {
    fn default() -> Self {
        Self { t_count: 500, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Shared training configuration for both deep models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub ddpm: DdpmHyperParams,
    pub flow: FlowConfig,
}

impl Default for DgmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 6_000,
            batch_size: 32,
            lr: 1e-3,
            base_width: 32,
            depth: 2,
            time_embed_dim: 64,
            groups: 8,
            ddpm: DdpmHyperParams::default(),
            flow: FlowConfig::default(),
        }
    }
}

/// A trained model plus its decoding context.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub unet: UNet1d,
    pub schedule: Option<NoiseSchedule>,
    pub flow: Option<FlowConfig>,
    pub scaler: Scaler,
    pub bins: SpeedBins,
    pub dirs: DirectionSet,
    pub altitudes: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    unet_config: UNetConfig,
    schedule: Option<NoiseSchedule>,
    flow: Option<FlowConfig>,
    scaler: Scaler,
    bins: SpeedBins,
    dirs: DirectionSet,
    altitudes: Vec<f64>,
}

/// Normalized, padded training rows plus the shared loss mask.
struct PreparedData {
    rows: Vec<Vec<f64>>,
    labels: Vec<ConditionLabel>,
    scaler: Scaler,
    a: usize,
    a_pad: usize,
}

fn prepare(dataset: &Dataset, padded: usize) -> Result<PreparedData> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scaler = fit_scaler(dataset)?;
    let a = dataset.altitude_count();
    let rows = dataset
        .profiles
        .iter()
        .map(|p| {
            let normalized = scaler.forward_vec(&p.flatten());
            let t = Tensor::from_vec(&[1, 2, a], normalized)?;
            Ok(pad_tail_replicate(&t, padded)?.data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = dataset.profiles.iter().map(|p| p.condition).collect();
    Ok(PreparedData { rows, labels, scaler, a, a_pad: padded })
}

fn gather_batch(
    data: &PreparedData,
    indices: &[usize],
) -> (Tensor, Vec<ConditionLabel>) {
    let sample_len = 2 * data.a_pad;
    let mut x = Tensor::zeros(&[indices.len(), 2, data.a_pad]);
    let mut cond = Vec::with_capacity(indices.len());
    for (b, &i) in indices.iter().enumerate() {
        x.data[b * sample_len..(b + 1) * sample_len].copy_from_slice(&data.rows[i]);
        cond.push(data.labels[i]);
    }
    (x, cond)
}

fn train_loop<F>(
    dataset: &Dataset,
    bins: &SpeedBins,
    dirs: &DirectionSet,
    cfg: &DgmTrainConfig,
    seed: u64,
    mut step_fn: F,
) -> Result<(UNet1d, Scaler, Vec<f64>)>
where
    F: FnMut(&UNet1d, &Tensor, &[ConditionLabel], &Tensor, &mut rand_chacha::ChaCha8Rng) -> Result<(f64, Vec<Tensor>)>,
{
    use rand::RngExt;
    let unet_config = UNetConfig {
        in_channels: 2,
        sequence_length: dataset.altitude_count(),
        base_width: cfg.base_width,
        depth: cfg.depth,
        cond_classes: (bins.len(), dirs.len()),
        time_embed_dim: cfg.time_embed_dim,
        groups: cfg.groups,
    };
    let data = prepare(dataset, unet_config.padded_length())?;
    let mut net = UNet1d::init(unet_config, derive_seed(seed, 1))?;
    let mut rng = rng_for(seed, 2);
    let mut adam = AdamState::new(&net.params);
    let mask = tail_mask(cfg.batch_size, 2, data.a_pad, data.a);

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.random_range(0..data.rows.len())).collect();
        let (x, cond) = gather_batch(&data, &indices);
        let (loss, grads) = step_fn(&net, &x, &cond, &mask, &mut rng)?;
        // Linear learning-rate decay to 10% of the initial rate.
        let frac = step as f64 / cfg.steps as f64;
        let adam_cfg = AdamConfig { lr: cfg.lr * (1.0 - 0.9 * frac), ..AdamConfig::default() };
        adam_step(&mut adam, &mut net.params, &grads, &adam_cfg)?;
        losses.push(loss);
    }
    Ok((net, data.scaler, losses))
}

/// Train a conditional diffusion model on a dataset.
pub fn train_ddpm(
    dataset: &Dataset,
    bins: &SpeedBins,
    dirs: &DirectionSet,
    cfg: &DgmTrainConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<f64>)> {
    let schedule = linear_schedule(cfg.ddpm.t_count, cfg.ddpm.beta_start, cfg.ddpm.beta_end)?;
    let sched = schedule.clone();
    let (unet, scaler, losses) =
        train_loop(dataset, bins, dirs, cfg, seed, |net, x, cond, mask, rng| {
            ddpm_train_step(net, x, cond, mask, &sched, rng)
        })?;
    let checkpoint = Checkpoint {
        kind: ModelKind::Ddpm,
        unet,
        schedule: Some(schedule),
        flow: None,
        scaler,
        bins: bins.clone(),
        dirs: dirs.clone(),
        altitudes: dataset.altitudes.clone(),
    };
    Ok((checkpoint, losses))
}

/// Train a conditional flow-matching model on a dataset.
pub fn train_fm(
    dataset: &Dataset,
    bins: &SpeedBins,
    dirs: &DirectionSet,
    cfg: &DgmTrainConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<f64>)> {
    cfg.flow.validate()?;
    let sigma = cfg.flow.sigma;
    let (unet, scaler, losses) =
        train_loop(dataset, bins, dirs, cfg, seed, |net, x, cond, mask, rng| {
            fm_train_step(net, x, cond, mask, sigma, rng)
        })?;
    let checkpoint = Checkpoint {
        kind: ModelKind::Fm,
        unet,
        schedule: None,
        flow: Some(cfg.flow),
        scaler,
        bins: bins.clone(),
        dirs: dirs.clone(),
        altitudes: dataset.altitudes.clone(),
    };
    Ok((checkpoint, losses))
}

impl Checkpoint {
    /// Generate labeled profiles for one condition.
    pub fn sample_profiles(
        &self,
        condition: ConditionLabel,
        n: usize,
        seed: u64,
    ) -> Result<Vec<WindProfile>> {
        if condition.speed_bin >= self.bins.len() || condition.direction >= self.dirs.len() {
            return Err(Error::InvalidInput(format!(
                "condition ({}, {}) outside checkpoint vocabulary",
                condition.speed_bin, condition.direction
            )));
        }
        let latents = match self.kind {
            ModelKind::Ddpm => {
                let schedule = self
                    .schedule
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("ddpm checkpoint lacks a schedule".into()))?;
                ddpm_sample_latents(&self.unet, schedule, condition, n, seed)?
            }
            ModelKind::Fm => {
                let flow = self
                    .flow
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("fm checkpoint lacks a flow config".into()))?;
                fm_sample_latents(&self.unet, flow, condition, n, seed)?
            }
        };
        let a = self.altitudes.len();
        let a_pad = self.unet.config.padded_length();
        latents
            .into_iter()
            .map(|flat| {
                let t = Tensor::from_vec(&[1, 2, a_pad], flat)?;
                let cropped = crop_tail(&t, a)?;
                let physical = self.scaler.inverse_vec(&cropped.data);
                Ok(WindProfile::from_flat(&physical, condition))
            })
            .collect()
    }

    /// Serialize to a byte buffer (JSON header + raw parameter block).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            unet_config: self.unet.config.clone(),
            schedule: self.schedule.clone(),
            flow: self.flow,
            scaler: self.scaler.clone(),
            bins: self.bins.clone(),
            dirs: self.dirs.clone(),
            altitudes: self.altitudes.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())?;
        out.write_all(&header_json)?;
        write_params(&mut out, &self.unet.params)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let header_len = u64::from_le_bytes(len_buf) as usize;
        if header_len > r.len() {
            return Err(Error::Checkpoint("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..header_len])?;
        let mut rest = &r[header_len..];
        let params = read_params(&mut rest)?;
        Ok(Self {
            kind: header.kind,
            unet: UNet1d { config: header.unet_config, params },
            schedule: header.schedule,
            flow: header.flow,
            scaler: header.scaler,
            bins: header.bins,
            dirs: header.dirs,
            altitudes: header.altitudes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
