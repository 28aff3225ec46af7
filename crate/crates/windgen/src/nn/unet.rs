//! Conditioned 1D U-Net shared by the diffusion and flow models.
//!
//! Encoder stages of two conv→group-norm→SiLU blocks with a residual add,
//! strided-conv downsampling, a two-block bottleneck, and a mirrored decoder
//! with skip concatenations. At every stage the sum of the sinusoidal time
//! embedding and the learned condition embeddings (one table per condition
//! factor) is linearly projected and added channelwise. The final output
//! projection starts at zero.

use serde::{Deserialize, Serialize};

use crate::data::ConditionLabel;
use crate::error::{Error, Result};
use crate::nn::embed::time_embed_batch;
use crate::nn::tape::{Tape, ValId};
use crate::nn::tensor::Tensor;
use crate::seed::rng_from;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Input channels (2: u and v).
    pub in_channels: usize,
    /// Unpadded sequence length A.
    pub sequence_length: usize,
    pub base_width: usize,
    /// Number of down/up stages.
    pub depth: usize,
    /// (speed-bin count, direction count).
    pub cond_classes: (usize, usize),
    pub time_embed_dim: usize,
    /// Group-norm group count.
    pub groups: usize,
}

impl UNetConfig {
    /// Reference configuration for wind profiles of length A.
    pub fn wind_default(a: usize, cond_classes: (usize, usize)) -> Self {
        Self {
            in_channels: 2,
            sequence_length: a,
            base_width: 32,
            depth: 2,
            cond_classes,
            time_embed_dim: 64,
            groups: 8,
        }
    }

    /// Smallest length divisible by 2^depth that fits the sequence.
    pub fn padded_length(&self) -> usize {
        let unit = 1usize << self.depth;
        self.sequence_length.div_ceil(unit) * unit
    }

    /// Channel width of each encoder stage.
    fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|s| self.base_width << s).collect()
    }

    fn bottleneck_width(&self) -> usize {
        self.widths().last().copied().unwrap_or(self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 || self.sequence_length == 0 {
            problems.push("in_channels and sequence_length must be positive".to_string());
        }
        if !self.base_width.is_multiple_of(self.groups) {
            problems.push(format!(
                "base_width {} must be divisible by groups {}",
                self.base_width, self.groups
            ));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            problems.push(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        if self.cond_classes.0 == 0 || self.cond_classes.1 == 0 {
            problems.push("condition vocabularies must be non-empty".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { problems })
        }
    }
}

/// Named, ordered parameter storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub(crate) fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.entries.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// The U-Net: configuration plus all learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet1d {
    pub config: UNetConfig,
    pub params: ParamSet,
}

fn conv_params(ps: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, out_c: usize, in_c: usize, k: usize) {
    let std = (2.0 / (in_c * k) as f64).sqrt();
    ps.push(format!("{prefix}.w"), Tensor::randn(&[out_c, in_c, k], std, rng));
    ps.push(format!("{prefix}.b"), Tensor::zeros(&[out_c]));
}

fn linear_params(ps: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, out_d: usize, in_d: usize) {
    let std = (2.0 / in_d as f64).sqrt();
    ps.push(format!("{prefix}.w"), Tensor::randn(&[out_d, in_d], std, rng));
    ps.push(format!("{prefix}.b"), Tensor::zeros(&[out_d]));
}

fn norm_params(ps: &mut ParamSet, prefix: &str, channels: usize) {
    ps.push(
        format!("{prefix}.g"),
        Tensor::from_vec(&[channels], vec![1.0; channels]).unwrap(),
    );
    ps.push(format!("{prefix}.b"), Tensor::zeros(&[channels]));
}

fn res_block_params(
    ps: &mut ParamSet,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    te: usize,
) {
    conv_params(ps, rng, &format!("{prefix}.conv1"), out_c, in_c, 3);
    norm_params(ps, &format!("{prefix}.gn1"), out_c);
    linear_params(ps, rng, &format!("{prefix}.emb"), out_c, te);
    conv_params(ps, rng, &format!("{prefix}.conv2"), out_c, out_c, 3);
    norm_params(ps, &format!("{prefix}.gn2"), out_c);
    if in_c != out_c {
        conv_params(ps, rng, &format!("{prefix}.skip"), out_c, in_c, 1);
    }
}

impl UNet1d {
    /// Deterministically initialize all parameters from a seed.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut ps = ParamSet::default();
        let te = config.time_embed_dim;

        ps.push(
            "cond.speed",
            Tensor::randn(&[config.cond_classes.0, te], 0.1, &mut rng),
        );
        ps.push(
            "cond.dir",
            Tensor::randn(&[config.cond_classes.1, te], 0.1, &mut rng),
        );

        conv_params(&mut ps, &mut rng, "stem", config.base_width, config.in_channels, 3);

        let widths = config.widths();
        let mut in_c = config.base_width;
        for (s, &w) in widths.iter().enumerate() {
            res_block_params(&mut ps, &mut rng, &format!("enc{s}"), in_c, w, te);
            conv_params(&mut ps, &mut rng, &format!("enc{s}.down"), w, w, 3);
            in_c = w;
        }

        let mid = config.bottleneck_width();
        res_block_params(&mut ps, &mut rng, "mid1", mid, mid, te);
        res_block_params(&mut ps, &mut rng, "mid2", mid, mid, te);

        let mut deeper = mid;
        for s in (0..config.depth).rev() {
            let w = widths[s];
            conv_params(&mut ps, &mut rng, &format!("dec{s}.up"), deeper, deeper, 3);
            res_block_params(&mut ps, &mut rng, &format!("dec{s}"), w + deeper, w, te);
            deeper = w;
        }

        norm_params(&mut ps, "out.gn", deeper);
        // Zero-initialized output projection: a fresh network maps
        // everything to zero.
        ps.push(
            "out.conv.w",
            Tensor::zeros(&[config.in_channels, deeper, 3]),
        );
        ps.push("out.conv.b", Tensor::zeros(&[config.in_channels]));

        Ok(Self { config, params: ps })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_params()
    }

    /// Record the network on a tape.
    ///
    /// `x` is `[B, in_channels, padded_length]`, `t` holds one time in [0,1]
    /// per sample, `cond` one condition label per sample. Returns the output
    /// id and the leaf ids of all parameters, aligned with parameter order.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        t: &[f64],
        cond: &[ConditionLabel],
    ) -> Result<(ValId, Vec<ValId>)> {
        let a_pad = self.config.padded_length();
        let batch = x.shape.first().copied().unwrap_or(0);
        if x.shape != [batch, self.config.in_channels, a_pad] {
            return Err(Error::InvalidInput(format!(
                "unet input shape {:?}, expected [{batch}, {}, {a_pad}]",
                x.shape, self.config.in_channels
            )));
        }
        if t.len() != batch || cond.len() != batch {
            return Err(Error::DimMismatch {
                context: "unet batch",
                expected: batch,
                actual: t.len().min(cond.len()),
            });
        }
        if !x.all_finite() || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unet input".into()));
        }
        for c in cond {
            if c.speed_bin >= self.config.cond_classes.0
                || c.direction >= self.config.cond_classes.1
            {
                return Err(Error::InvalidInput(format!(
                    "condition ({}, {}) outside vocabulary ({}, {})",
                    c.speed_bin, c.direction, self.config.cond_classes.0, self.config.cond_classes.1
                )));
            }
        }

        let param_ids: Vec<ValId> = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        let p = |name: &str| -> Result<ValId> {
            self.params
                .index_of(name)
                .map(|i| param_ids[i])
                .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
        };

        // Embedding: sinusoidal time + speed table + direction table.
        let te = time_embed_batch(t, self.config.time_embed_dim)?;
        let te_id = tape.leaf(te);
        let spd: Vec<usize> = cond.iter().map(|c| c.speed_bin).collect();
        let dir: Vec<usize> = cond.iter().map(|c| c.direction).collect();
        let spd_emb = tape.embed(p("cond.speed")?, &spd)?;
        let dir_emb = tape.embed(p("cond.dir")?, &dir)?;
        let cond_emb = tape.add(spd_emb, dir_emb)?;
        let emb = tape.add(cond_emb, te_id)?;

        let res_block = |tape: &mut Tape, prefix: &str, h: ValId, in_c: usize, out_c: usize| -> Result<ValId> {
            let groups = self.config.groups;
            let c1 = tape.conv1d(h, p(&format!("{prefix}.conv1.w"))?, p(&format!("{prefix}.conv1.b"))?, 1, 1)?;
            let n1 = tape.group_norm(c1, p(&format!("{prefix}.gn1.g"))?, p(&format!("{prefix}.gn1.b"))?, groups)?;
            let a1 = tape.silu(n1)?;
            let e = tape.linear(emb, p(&format!("{prefix}.emb.w"))?, p(&format!("{prefix}.emb.b"))?)?;
            let h1 = tape.add_channel(a1, e)?;
            let c2 = tape.conv1d(h1, p(&format!("{prefix}.conv2.w"))?, p(&format!("{prefix}.conv2.b"))?, 1, 1)?;
            let n2 = tape.group_norm(c2, p(&format!("{prefix}.gn2.g"))?, p(&format!("{prefix}.gn2.b"))?, groups)?;
            let a2 = tape.silu(n2)?;
            let skip = if in_c == out_c {
                h
            } else {
                tape.conv1d(h, p(&format!("{prefix}.skip.w"))?, p(&format!("{prefix}.skip.b"))?, 1, 0)?
            };
            tape.add(a2, skip)
        };

        let x_id = tape.leaf(x.clone());
        let mut h = tape.conv1d(x_id, p("stem.w")?, p("stem.b")?, 1, 1)?;

        let widths = self.config.widths();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut in_c = self.config.base_width;
        for (s, &w) in widths.iter().enumerate() {
            h = res_block(tape, &format!("enc{s}"), h, in_c, w)?;
            skips.push(h);
            h = tape.conv1d(h, p(&format!("enc{s}.down.w"))?, p(&format!("enc{s}.down.b"))?, 2, 1)?;
            in_c = w;
        }

        let mid = self.config.bottleneck_width();
        h = res_block(tape, "mid1", h, mid, mid)?;
        h = res_block(tape, "mid2", h, mid, mid)?;

        let mut deeper = mid;
        for s in (0..self.config.depth).rev() {
            let w = widths[s];
            h = tape.upsample_nearest2(h)?;
            h = tape.conv1d(h, p(&format!("dec{s}.up.w"))?, p(&format!("dec{s}.up.b"))?, 1, 1)?;
            h = tape.concat_channels(h, skips[s])?;
            h = res_block(tape, &format!("dec{s}"), h, w + deeper, w)?;
            deeper = w;
        }

        let n = tape.group_norm(h, p("out.gn.g")?, p("out.gn.b")?, self.config.groups)?;
        let a = tape.silu(n)?;
        let out = tape.conv1d(a, p("out.conv.w")?, p("out.conv.b")?, 1, 1)?;

        if !tape.value(out).all_finite() {
            return Err(Error::NonFinite("unet output".into()));
        }
        Ok((out, param_ids))
    }

    /// Plain forward pass; records on a throwaway tape.
    pub fn forward(&self, x: &Tensor, t: &[f64], cond: &[ConditionLabel]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_on(&mut tape, x, t, cond)?;
        Ok(tape.value(out).clone())
    }

    /// Extract parameter gradients from a backward pass, aligned with
    /// parameter order.
    pub fn collect_grads(&self, grads: &[Tensor], param_ids: &[ValId]) -> Vec<Tensor> {
        param_ids.iter().map(|id| grads[id.index()].clone()).collect()
    }
}

/// Pad `[B, C, L]` to `[B, C, target]` by replicating the last position.
pub fn pad_tail_replicate(x: &Tensor, target: usize) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::InvalidInput("pad expects [B,C,L]".into()));
    }
    let len = x.shape[2];
    if target < len {
        return Err(Error::InvalidInput("pad target shorter than input".into()));
    }
    let mut data = Vec::with_capacity(x.shape[0] * x.shape[1] * target);
    for row in x.data.chunks(len) {
        data.extend_from_slice(row);
        for _ in len..target {
            data.push(row[len - 1]);
        }
    }
    Tensor::from_vec(&[x.shape[0], x.shape[1], target], data)
}

/// Crop `[B, C, L]` back to `[B, C, target]`.
pub fn crop_tail(x: &Tensor, target: usize) -> Result<Tensor> {
    if x.shape.len() != 3 || target > x.shape[2] {
        return Err(Error::InvalidInput("crop target exceeds input".into()));
    }
    let len = x.shape[2];
    let mut data = Vec::with_capacity(x.shape[0] * x.shape[1] * target);
    for row in x.data.chunks(len) {
        data.extend_from_slice(&row[..target]);
    }
    Tensor::from_vec(&[x.shape[0], x.shape[1], target], data)
}

/// Mask that is 1 on the first `valid` positions and 0 on the padded tail.
pub fn tail_mask(batch: usize, channels: usize, padded: usize, valid: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * channels * padded);
    for _ in 0..batch * channels {
        for l in 0..padded {
            data.push(if l < valid { 1.0 } else { 0.0 });
        }
    }
    Tensor::from_vec(&[batch, channels, padded], data).unwrap()
}
