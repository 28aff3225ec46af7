//! Sinusoidal time embedding.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Frequency range of the sinusoids; high enough that a 1,000-point grid
/// of t values maps to pairwise-distinct embeddings.
const FREQ_MIN: f64 = 1.0;
const FREQ_MAX: f64 = 1000.0;

/// Interleaved sin/cos embedding of a scalar time in [0, 1].
///
/// `dim` must be even; frequency `i` of the `dim/2` pairs is geometrically
/// spaced between 1 and 1000.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 {
            FREQ_MIN
        } else {
            FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(i as f64 / (half - 1) as f64)
        };
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Stack per-sample time embeddings into a `[B, dim]` tensor.
pub fn time_embed_batch(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embed(t, dim)?);
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}
