//! Flow matching: linear conditional probability paths, velocity-field
//! regression, and sampling by fixed-step ODE integration.
//!
//! Time runs source → target: t = 0 is the Gaussian source, t = 1 the data.
//! The path mean interpolates a source/target pair, `μ_t = t·x₁ + (1−t)·x₀`,
//! with a small constant standard deviation around it, and the regression
//! target is the pair difference `x₁ − x₀`. The continuity equation the
//! learned field transports mass under is motivation only; no divergence is
//! evaluated anywhere.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ConditionLabel;
use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, UNet1d};
use crate::seed::rng_for;

/// Fixed-step integrators for the sampling ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Heun,
}

/// Path and integration hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Path standard deviation in normalized space.
    pub sigma: f64,
    /// Integration step count.
    pub n_steps: usize,
    pub integrator: Integrator,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { sigma: 0.01, n_steps: 100, integrator: Integrator::Euler }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            problems.push(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.n_steps == 0 {
            problems.push("n_steps must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { problems })
        }
    }
}

/// Draw a path point `x_t ~ N(t·x₁ + (1−t)·x₀, σ²·I)`.
pub fn fm_path_sample(
    x0: &[f64],
    x1: &[f64],
    t: f64,
    sigma: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("path time {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::DimMismatch {
            context: "fm_path_sample",
            expected: x1.len(),
            actual: x0.len(),
        });
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| {
            let eta: f64 = StandardNormal.sample(rng);
            t * b + (1.0 - t) * a + sigma * eta
        })
        .collect())
}

/// One training step: per sample draws a Gaussian source, a uniform time,
/// and a path point, then regresses the network on `x₁ − x₀`.
pub fn fm_train_step(
    net: &UNet1d,
    x1: &Tensor,
    cond: &[ConditionLabel],
    mask: &Tensor,
    sigma: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    use rand::RngExt;
    let batch = x1.shape[0];
    let sample_len = x1.numel() / batch;

    let mut x_t = Tensor::zeros(&x1.shape);
    let mut target = Tensor::zeros(&x1.shape);
    let mut times = Vec::with_capacity(batch);
    for b in 0..batch {
        let t: f64 = rng.random();
        times.push(t);
        let lo = b * sample_len;
        let mut x0 = vec![0.0; sample_len];
        for x in &mut x0 {
            *x = StandardNormal.sample(rng);
        }
        let path = fm_path_sample(&x0, &x1.data[lo..lo + sample_len], t, sigma, rng)?;
        x_t.data[lo..lo + sample_len].copy_from_slice(&path);
        for (j, &src) in x0.iter().enumerate() {
            target.data[lo + j] = x1.data[lo + j] - src;
        }
    }
    // Padded tail mirrors the last valid position, matching the sampler.
    crate::ddpm::enforce_pad(&mut x_t.data, x1.shape[2], net.config.sequence_length);

    let mut tape = Tape::new();
    let (out, param_ids) = net.forward_on(&mut tape, &x_t, &times, cond)?;
    let loss_id = tape.mse_masked(out, &target, mask)?;
    let loss = tape.value(loss_id).data[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "fm loss (batch {batch}, max |x_t| = {:.3e})",
            x_t.max_abs()
        )));
    }
    let grads = tape.backward(loss_id)?;
    Ok((loss, net.collect_grads(&grads, &param_ids)))
}

/// Integrate `dx/dt = field(x, t)` from t = 0 to 1 with fixed steps.
pub fn integrate<F>(
    mut field: F,
    x0: Vec<f64>,
    n_steps: usize,
    integrator: Integrator,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if n_steps == 0 {
        return Err(Error::InvalidInput("n_steps must be at least 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0;
    for step in 0..n_steps {
        let t = step as f64 * dt;
        let k1 = field(&x, t)?;
        match integrator {
            Integrator::Euler => {
                for (xi, k) in x.iter_mut().zip(&k1) {
                    *xi += dt * k;
                }
            }
            Integrator::Heun => {
                let probe: Vec<f64> = x.iter().zip(&k1).map(|(&xi, &k)| xi + dt * k).collect();
                let k2 = field(&probe, t + dt)?;
                for ((xi, &a), &b) in x.iter_mut().zip(&k1).zip(&k2) {
                    *xi += 0.5 * dt * (a + b);
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow integration at step {step}")));
        }
    }
    Ok(x)
}

/// Batched conditional sampling in normalized padded space. Sample `i`
/// draws its source point from the stream derived from `(seed, i)`.
pub fn fm_sample_latents(
    net: &UNet1d,
    config: &FlowConfig,
    condition: ConditionLabel,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let channels = net.config.in_channels;
    let length = net.config.padded_length();
    let valid = net.config.sequence_length;
    let sample_len = channels * length;
    const BATCH: usize = 256;

    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = BATCH.min(n - start);
        let mut x = Tensor::zeros(&[count, channels, length]);
        for b in 0..count {
            let mut rng = rng_for(seed, (start + b) as u64);
            for j in 0..sample_len {
                x.data[b * sample_len + j] = StandardNormal.sample(&mut rng);
            }
        }
        crate::ddpm::enforce_pad(&mut x.data, length, valid);
        let cond = vec![condition; count];
        let dt = 1.0 / config.n_steps as f64;
        for step in 0..config.n_steps {
            let t = step as f64 * dt;
            let t_vec = vec![t; count];
            let v1 = net.forward(&x, &t_vec, &cond)?;
            match config.integrator {
                Integrator::Euler => {
                    for (xi, vi) in x.data.iter_mut().zip(&v1.data) {
                        *xi += dt * vi;
                    }
                }
                Integrator::Heun => {
                    let mut probe = x.clone();
                    for (pi, vi) in probe.data.iter_mut().zip(&v1.data) {
                        *pi += dt * vi;
                    }
                    crate::ddpm::enforce_pad(&mut probe.data, length, valid);
                    let t2 = vec![t + dt; count];
                    let v2 = net.forward(&probe, &t2, &cond)?;
                    for ((xi, &a), &b) in x.data.iter_mut().zip(&v1.data).zip(&v2.data) {
                        *xi += 0.5 * dt * (a + b);
                    }
                }
            }
            crate::ddpm::enforce_pad(&mut x.data, length, valid);
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("fm batch state at step {step}")));
            }
        }
        for b in 0..count {
            out.push(x.data[b * sample_len..(b + 1) * sample_len].to_vec());
        }
        start += count;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn path_endpoints_recover_source_and_target() {
        let mut rng = rng_from(1);
        let x0 = vec![1.0, -2.0];
        let x1 = vec![3.0, 0.5];
        let at0 = fm_path_sample(&x0, &x1, 0.0, 1e-12, &mut rng).unwrap();
        let at1 = fm_path_sample(&x0, &x1, 1.0, 1e-12, &mut rng).unwrap();
        for (a, b) in at0.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in at1.iter().zip(&x1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn midpoint_mean_is_linear_interpolation() {
        let mut rng = rng_from(2);
        let x = fm_path_sample(&[0.0, 0.0], &[2.0, 4.0], 0.5, 0.0, &mut rng).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }

    #[test]
    fn path_noise_has_requested_scale() {
        let mut rng = rng_from(3);
        let sigma = 0.35;
        let n = 100_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = fm_path_sample(&[1.0], &[2.0], 0.3, sigma, &mut rng).unwrap();
            let mu = 0.3 * 2.0 + 0.7 * 1.0;
            sum_sq += (x[0] - mu) * (x[0] - mu);
        }
        let std = (sum_sq / n as f64).sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std}");
    }

    #[test]
    fn out_of_range_time_is_rejected() {
        let mut rng = rng_from(4);
        assert!(fm_path_sample(&[0.0], &[1.0], -0.1, 0.1, &mut rng).is_err());
        assert!(fm_path_sample(&[0.0], &[1.0], 1.1, 0.1, &mut rng).is_err());
    }

    #[test]
    fn constant_field_is_integrated_exactly_in_one_step() {
        let target = vec![2.0, -1.0, 0.5];
        let x0 = vec![0.5, 0.5, 0.5];
        let diff: Vec<f64> = target.iter().zip(&x0).map(|(t, s)| t - s).collect();
        let out = integrate(|_, _| Ok(diff.clone()), x0, 1, Integrator::Euler).unwrap();
        for (a, b) in out.iter().zip(&target) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_decay_field_matches_analytic_solution() {
        // v(x, t) = −x integrates to e⁻¹·x0 over [0, 1].
        let x0 = vec![1.0, -3.0];
        let out = integrate(
            |x, _| Ok(x.iter().map(|&v| -v).collect()),
            x0.clone(),
            1_000,
            Integrator::Euler,
        )
        .unwrap();
        for (a, &b) in out.iter().zip(&x0) {
            let expect = b * (-1.0_f64).exp();
            assert!(
                (a - expect).abs() / expect.abs() < 1e-3,
                "euler: {a} vs {expect}"
            );
        }
        // Heun converges to the same limit much faster.
        let out = integrate(
            |x, _| Ok(x.iter().map(|&v| -v).collect()),
            x0.clone(),
            100,
            Integrator::Heun,
        )
        .unwrap();
        for (a, &b) in out.iter().zip(&x0) {
            let expect = b * (-1.0_f64).exp();
            assert!(
                (a - expect).abs() / expect.abs() < 1e-4,
                "heun: {a} vs {expect}"
            );
        }
    }

    #[test]
    fn integration_reports_step_on_divergence() {
        let result = integrate(
            |_, t| {
                if t > 0.5 {
                    Ok(vec![f64::NAN])
                } else {
                    Ok(vec![0.0])
                }
            },
            vec![0.0],
            10,
            Integrator::Euler,
        );
        match result {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("step 6"), "{msg}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        use crate::nn::{UNet1d, UNetConfig};
        let cfg = UNetConfig {
            in_channels: 2,
            sequence_length: 4,
            base_width: 8,
            depth: 1,
            cond_classes: (4, 16),
            time_embed_dim: 8,
            groups: 4,
        };
        let net = UNet1d::init(cfg, 50).unwrap();
        let fc = FlowConfig { n_steps: 8, ..FlowConfig::default() };
        let c = crate::data::ConditionLabel::new(2, 7);
        let a = fm_sample_latents(&net, &fc, c, 5, 5).unwrap();
        let b = fm_sample_latents(&net, &fc, c, 5, 5).unwrap();
        assert_eq!(a, b);
        let big = fm_sample_latents(&net, &fc, c, 9, 5).unwrap();
        assert_eq!(&big[..5], &a[..]);
    }
}
