//! Numeric kernels behind the tape ops.
//!
//! Every kernel computes each output element with a fixed sequential
//! reduction, so results are bit-identical regardless of thread count;
//! parallel splits only partition disjoint output regions.

use rayon::prelude::*;

/// Work threshold below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub len: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let lo = d.out_len();
    let mut out = vec![0.0; d.batch * d.out_ch * lo];
    let work = d.batch * d.out_ch * d.in_ch * d.kernel * lo;
    let same3 = d.kernel == 3 && d.stride == 1 && d.pad == 1 && d.len >= 2;
    let point1 = d.kernel == 1 && d.stride == 1 && d.pad == 0;
    let body = |b: usize, out_b: &mut [f64]| {
        let x_b = &x[b * d.in_ch * d.len..(b + 1) * d.in_ch * d.len];
        for o in 0..d.out_ch {
            let y_row = &mut out_b[o * lo..(o + 1) * lo];
            y_row.fill(bias[o]);
            for ic in 0..d.in_ch {
                let x_row = &x_b[ic * d.len..(ic + 1) * d.len];
                let w_row = &w[(o * d.in_ch + ic) * d.kernel..(o * d.in_ch + ic + 1) * d.kernel];
                if same3 {
                    let (w0, w1, w2) = (w_row[0], w_row[1], w_row[2]);
                    let last = d.len - 1;
                    y_row[0] += w1 * x_row[0] + w2 * x_row[1];
                    for i in 1..last {
                        y_row[i] += w0 * x_row[i - 1] + w1 * x_row[i] + w2 * x_row[i + 1];
                    }
                    y_row[last] += w0 * x_row[last - 1] + w1 * x_row[last];
                } else if point1 {
                    let wv = w_row[0];
                    for (y, &xv) in y_row.iter_mut().zip(x_row) {
                        *y += wv * xv;
                    }
                } else {
                    for (k, &wv) in w_row.iter().enumerate() {
                        for (i, y) in y_row.iter_mut().enumerate() {
                            let pos = i * d.stride + k;
                            if pos >= d.pad && pos - d.pad < d.len {
                                *y += wv * x_row[pos - d.pad];
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(d.out_ch * lo).enumerate().for_each(|(b, out_b)| body(b, out_b));
    } else {
        for (b, out_b) in out.chunks_mut(d.out_ch * lo).enumerate() {
            body(b, out_b);
        }
    }
    out
}

/// Gradients with respect to the convolution input.
pub fn conv1d_backward_x(dy: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let lo = d.out_len();
    let mut dx = vec![0.0; d.batch * d.in_ch * d.len];
    let work = d.batch * d.out_ch * d.in_ch * d.kernel * lo;
    let same3 = d.kernel == 3 && d.stride == 1 && d.pad == 1 && d.len >= 2;
    let point1 = d.kernel == 1 && d.stride == 1 && d.pad == 0;
    let body = |b: usize, dx_b: &mut [f64]| {
        let dy_b = &dy[b * d.out_ch * lo..(b + 1) * d.out_ch * lo];
        for o in 0..d.out_ch {
            let dy_row = &dy_b[o * lo..(o + 1) * lo];
            for ic in 0..d.in_ch {
                let dx_row = &mut dx_b[ic * d.len..(ic + 1) * d.len];
                let w_row = &w[(o * d.in_ch + ic) * d.kernel..(o * d.in_ch + ic + 1) * d.kernel];
                if same3 {
                    // dx[j] = Σ_k w_k · dy[j + 1 − k] (correlation).
                    let (w0, w1, w2) = (w_row[0], w_row[1], w_row[2]);
                    let last = d.len - 1;
                    dx_row[0] += w1 * dy_row[0] + w0 * dy_row[1];
                    for j in 1..last {
                        dx_row[j] += w2 * dy_row[j - 1] + w1 * dy_row[j] + w0 * dy_row[j + 1];
                    }
                    dx_row[last] += w2 * dy_row[last - 1] + w1 * dy_row[last];
                } else if point1 {
                    let wv = w_row[0];
                    for (dxv, &g) in dx_row.iter_mut().zip(dy_row) {
                        *dxv += wv * g;
                    }
                } else {
                    for (k, &wv) in w_row.iter().enumerate() {
                        for (i, &g) in dy_row.iter().enumerate() {
                            let pos = i * d.stride + k;
                            if pos >= d.pad && pos - d.pad < d.len {
                                dx_row[pos - d.pad] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dx.par_chunks_mut(d.in_ch * d.len).enumerate().for_each(|(b, dx_b)| body(b, dx_b));
    } else {
        for (b, dx_b) in dx.chunks_mut(d.in_ch * d.len).enumerate() {
            body(b, dx_b);
        }
    }
    dx
}

/// Gradients with respect to the convolution weights and bias.
pub fn conv1d_backward_w(x: &[f64], dy: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>) {
    let lo = d.out_len();
    let mut dw = vec![0.0; d.out_ch * d.in_ch * d.kernel];
    let mut db = vec![0.0; d.out_ch];
    let work = d.batch * d.out_ch * d.in_ch * d.kernel * lo;
    let same3 = d.kernel == 3 && d.stride == 1 && d.pad == 1 && d.len >= 2;
    // Parallel over output channels: each owns its dw slab and db entry.
    let body = |o: usize, dw_o: &mut [f64], db_o: &mut f64| {
        for b in 0..d.batch {
            let dy_row = &dy[(b * d.out_ch + o) * lo..(b * d.out_ch + o + 1) * lo];
            for &g in dy_row {
                *db_o += g;
            }
            for ic in 0..d.in_ch {
                let x_row = &x[(b * d.in_ch + ic) * d.len..(b * d.in_ch + ic + 1) * d.len];
                let dw_row = &mut dw_o[ic * d.kernel..(ic + 1) * d.kernel];
                if same3 {
                    let last = d.len - 1;
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    a1 += dy_row[0] * x_row[0];
                    a2 += dy_row[0] * x_row[1];
                    for i in 1..last {
                        let g = dy_row[i];
                        a0 += g * x_row[i - 1];
                        a1 += g * x_row[i];
                        a2 += g * x_row[i + 1];
                    }
                    a0 += dy_row[last] * x_row[last - 1];
                    a1 += dy_row[last] * x_row[last];
                    dw_row[0] += a0;
                    dw_row[1] += a1;
                    dw_row[2] += a2;
                } else {
                    for (k, dw_k) in dw_row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (i, &g) in dy_row.iter().enumerate() {
                            let pos = i * d.stride + k;
                            if pos >= d.pad && pos - d.pad < d.len {
                                acc += g * x_row[pos - d.pad];
                            }
                        }
                        *dw_k += acc;
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.par_chunks_mut(d.in_ch * d.kernel)
            .zip(db.par_iter_mut())
            .enumerate()
            .for_each(|(o, (dw_o, db_o))| body(o, dw_o, db_o));
    } else {
        for (o, (dw_o, db_o)) in dw.chunks_mut(d.in_ch * d.kernel).zip(db.iter_mut()).enumerate() {
            body(o, dw_o, db_o);
        }
    }
    (dw, db)
}

pub struct GroupNormDims {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub groups: usize,
    pub eps: f64,
}

/// Returns (output, cache of per-(batch, group) mean and inverse std).
pub fn group_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: &GroupNormDims,
) -> (Vec<f64>, Vec<f64>) {
    let cg = d.channels / d.groups;
    let n = (cg * d.len) as f64;
    let mut out = vec![0.0; x.len()];
    let mut cache = vec![0.0; d.batch * d.groups * 2];
    for b in 0..d.batch {
        for g in 0..d.groups {
            let start = (b * d.channels + g * cg) * d.len;
            let end = start + cg * d.len;
            let slice = &x[start..end];
            let mean = slice.iter().sum::<f64>() / n;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + d.eps).sqrt();
            cache[(b * d.groups + g) * 2] = mean;
            cache[(b * d.groups + g) * 2 + 1] = inv_std;
            for c in 0..cg {
                let ch = g * cg + c;
                let row = &x[start + c * d.len..start + (c + 1) * d.len];
                let out_row = &mut out[start + c * d.len..start + (c + 1) * d.len];
                for (y, &v) in out_row.iter_mut().zip(row) {
                    *y = gamma[ch] * (v - mean) * inv_std + beta[ch];
                }
            }
        }
    }
    (out, cache)
}

/// Returns (dx, dgamma, dbeta).
pub fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    cache: &[f64],
    d: &GroupNormDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = d.channels / d.groups;
    let n = (cg * d.len) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d.channels];
    let mut dbeta = vec![0.0; d.channels];
    for b in 0..d.batch {
        for g in 0..d.groups {
            let start = (b * d.channels + g * cg) * d.len;
            let mean = cache[(b * d.groups + g) * 2];
            let inv_std = cache[(b * d.groups + g) * 2 + 1];

            // First pass: group means of γ·dy and γ·dy·x̂, plus dγ/dβ.
            let mut mean_g = 0.0;
            let mut mean_gx = 0.0;
            for c in 0..cg {
                let ch = g * cg + c;
                for l in 0..d.len {
                    let idx = start + c * d.len + l;
                    let xhat = (x[idx] - mean) * inv_std;
                    let ge = dy[idx] * gamma[ch];
                    mean_g += ge;
                    mean_gx += ge * xhat;
                    dgamma[ch] += dy[idx] * xhat;
                    dbeta[ch] += dy[idx];
                }
            }
            mean_g /= n;
            mean_gx /= n;

            for c in 0..cg {
                let ch = g * cg + c;
                for l in 0..d.len {
                    let idx = start + c * d.len + l;
                    let xhat = (x[idx] - mean) * inv_std;
                    let ge = dy[idx] * gamma[ch];
                    dx[idx] = inv_std * (ge - mean_g - xhat * mean_gx);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn silu_forward(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let s = 1.0 / (1.0 + (-v).exp());
            v * s
        })
        .collect()
}

pub fn silu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + (-v).exp());
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// y[b, o] = bias[o] + Σ_i w[o, i]·x[b, i]
pub fn linear_forward(x: &[f64], w: &[f64], bias: &[f64], batch: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * d_out];
    for b in 0..batch {
        let x_row = &x[b * d_in..(b + 1) * d_in];
        let out_row = &mut out[b * d_out..(b + 1) * d_out];
        for (o, y) in out_row.iter_mut().enumerate() {
            let w_row = &w[o * d_in..(o + 1) * d_in];
            *y = bias[o] + w_row.iter().zip(x_row).map(|(&a, &b)| a * b).sum::<f64>();
        }
    }
    out
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; batch * d_in];
    let mut dw = vec![0.0; d_out * d_in];
    let mut db = vec![0.0; d_out];
    for b in 0..batch {
        let x_row = &x[b * d_in..(b + 1) * d_in];
        let dy_row = &dy[b * d_out..(b + 1) * d_out];
        let dx_row = &mut dx[b * d_in..(b + 1) * d_in];
        for (o, &g) in dy_row.iter().enumerate() {
            db[o] += g;
            let w_row = &w[o * d_in..(o + 1) * d_in];
            let dw_row = &mut dw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dx_row[i] += g * w_row[i];
                dw_row[i] += g * x_row[i];
            }
        }
    }
    (dx, dw, db)
}
