//! Reverse-mode automatic differentiation over recorded tensor ops.
//!
//! A [`Tape`] records every forward operation together with its inputs and
//! result. [`Tape::backward`] walks the record in reverse, accumulating
//! gradients for every node; leaves that the loss never touched keep a zero
//! gradient.

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

impl ValId {
    /// Position of this value in the tape's node order.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv1d {
        x: ValId,
        w: ValId,
        b: ValId,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: ValId,
        gamma: ValId,
        beta: ValId,
        groups: usize,
        eps: f64,
        cache: Vec<f64>,
    },
    Silu {
        x: ValId,
    },
    Add {
        a: ValId,
        b: ValId,
    },
    AddChannel {
        x: ValId,
        bias: ValId,
    },
    Linear {
        x: ValId,
        w: ValId,
        b: ValId,
    },
    Embed {
        table: ValId,
        indices: Vec<usize>,
    },
    ConcatChannels {
        a: ValId,
        b: ValId,
    },
    UpsampleNearest2 {
        x: ValId,
    },
    MseMasked {
        pred: ValId,
        target: Tensor,
        mask: Tensor,
    },
    Sum {
        x: ValId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValId {
        self.nodes.push(Node { op, value });
        ValId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::InvalidInput("value id not recorded on this tape".into()))
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> ValId {
        self.push(Op::Leaf, t)
    }

    /// 1D convolution: x `[B, Cin, L]`, w `[Cout, Cin, K]`, b `[Cout]`.
    pub fn conv1d(&mut self, x: ValId, w: ValId, b: ValId, stride: usize, pad: usize) -> Result<ValId> {
        let d = self.conv_dims(x, w, b, stride, pad)?;
        let out = ops::conv1d_forward(
            &self.node(x)?.value.data,
            &self.node(w)?.value.data,
            &self.node(b)?.value.data,
            &d,
        );
        let value = Tensor::from_vec(&[d.batch, d.out_ch, d.out_len()], out)?;
        Ok(self.push(Op::Conv1d { x, w, b, stride, pad }, value))
    }

    fn conv_dims(&self, x: ValId, w: ValId, b: ValId, stride: usize, pad: usize) -> Result<ops::ConvDims> {
        let xs = &self.node(x)?.value.shape;
        let ws = &self.node(w)?.value.shape;
        let bs = &self.node(b)?.value.shape;
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(Error::InvalidInput("conv1d expects x[B,C,L], w[O,C,K], b[O]".into()));
        }
        if xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::DimMismatch {
                context: "conv1d channels",
                expected: ws[1],
                actual: xs[1],
            });
        }
        if xs[2] + 2 * pad < ws[2] || stride == 0 {
            return Err(Error::InvalidInput("conv1d kernel exceeds padded input".into()));
        }
        Ok(ops::ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            len: xs[2],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            pad,
        })
    }

    pub fn group_norm(&mut self, x: ValId, gamma: ValId, beta: ValId, groups: usize) -> Result<ValId> {
        let xs = &self.node(x)?.value.shape;
        if xs.len() != 3 {
            return Err(Error::InvalidInput("group_norm expects x[B,C,L]".into()));
        }
        let (batch, channels, len) = (xs[0], xs[1], xs[2]);
        if !channels.is_multiple_of(groups) {
            return Err(Error::InvalidInput(format!(
                "channels {channels} not divisible by groups {groups}"
            )));
        }
        if self.node(gamma)?.value.numel() != channels || self.node(beta)?.value.numel() != channels {
            return Err(Error::DimMismatch {
                context: "group_norm affine",
                expected: channels,
                actual: self.node(gamma)?.value.numel(),
            });
        }
        let d = ops::GroupNormDims { batch, channels, len, groups, eps: 1e-5 };
        let (out, cache) = ops::group_norm_forward(
            &self.node(x)?.value.data,
            &self.node(gamma)?.value.data,
            &self.node(beta)?.value.data,
            &d,
        );
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(Op::GroupNorm { x, gamma, beta, groups, eps: d.eps, cache }, value))
    }

    pub fn silu(&mut self, x: ValId) -> Result<ValId> {
        let v = &self.node(x)?.value;
        let value = Tensor::from_vec(&v.shape, ops::silu_forward(&v.data))?;
        Ok(self.push(Op::Silu { x }, value))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape != vb.shape {
            return Err(Error::DimMismatch {
                context: "add",
                expected: va.numel(),
                actual: vb.numel(),
            });
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(&va.shape, data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Broadcast-add a per-(batch, channel) bias over the length axis:
    /// x `[B, C, L]` + bias `[B, C]`.
    pub fn add_channel(&mut self, x: ValId, bias: ValId) -> Result<ValId> {
        let (vx, vb) = (&self.node(x)?.value, &self.node(bias)?.value);
        if vx.shape.len() != 3 || vb.shape.len() != 2 || vx.shape[0] != vb.shape[0] || vx.shape[1] != vb.shape[1]
        {
            return Err(Error::InvalidInput("add_channel expects x[B,C,L], bias[B,C]".into()));
        }
        let (bsz, ch, len) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let mut data = vx.data.clone();
        for b in 0..bsz {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                let bv = vb.data[b * ch + c];
                for v in &mut data[off..off + len] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::from_vec(&vx.shape, data)?;
        Ok(self.push(Op::AddChannel { x, bias }, value))
    }

    /// Fully connected layer: x `[B, In]`, w `[Out, In]`, b `[Out]`.
    pub fn linear(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let (vx, vw, vb) = (&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value);
        if vx.shape.len() != 2 || vw.shape.len() != 2 || vx.shape[1] != vw.shape[1] || vw.shape[0] != vb.numel()
        {
            return Err(Error::InvalidInput("linear expects x[B,I], w[O,I], b[O]".into()));
        }
        let (batch, d_in, d_out) = (vx.shape[0], vx.shape[1], vw.shape[0]);
        let out = ops::linear_forward(&vx.data, &vw.data, &vb.data, batch, d_in, d_out);
        let value = Tensor::from_vec(&[batch, d_out], out)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Row lookup: table `[V, E]`, one row per index.
    pub fn embed(&mut self, table: ValId, indices: &[usize]) -> Result<ValId> {
        let vt = &self.node(table)?.value;
        if vt.shape.len() != 2 {
            return Err(Error::InvalidInput("embed expects a [V, E] table".into()));
        }
        let (vocab, dim) = (vt.shape[0], vt.shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidInput(format!("embedding index {bad} out of range {vocab}")));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&vt.data[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_vec(&[indices.len(), dim], data)?;
        Ok(self.push(Op::Embed { table, indices: indices.to_vec() }, value))
    }

    /// Concatenate along the channel axis: `[B, C1, L]` ++ `[B, C2, L]`.
    pub fn concat_channels(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape.len() != 3
            || vb.shape.len() != 3
            || va.shape[0] != vb.shape[0]
            || va.shape[2] != vb.shape[2]
        {
            return Err(Error::InvalidInput("concat_channels shape mismatch".into()));
        }
        let (bsz, c1, c2, len) = (va.shape[0], va.shape[1], vb.shape[1], va.shape[2]);
        let mut data = Vec::with_capacity(bsz * (c1 + c2) * len);
        for bi in 0..bsz {
            data.extend_from_slice(&va.data[bi * c1 * len..(bi + 1) * c1 * len]);
            data.extend_from_slice(&vb.data[bi * c2 * len..(bi + 1) * c2 * len]);
        }
        let value = Tensor::from_vec(&[bsz, c1 + c2, len], data)?;
        Ok(self.push(Op::ConcatChannels { a, b }, value))
    }

    /// Nearest-neighbor ×2 upsampling along the length axis.
    pub fn upsample_nearest2(&mut self, x: ValId) -> Result<ValId> {
        let vx = &self.node(x)?.value;
        if vx.shape.len() != 3 {
            return Err(Error::InvalidInput("upsample expects x[B,C,L]".into()));
        }
        let len = vx.shape[2];
        let mut data = Vec::with_capacity(vx.numel() * 2);
        for row in vx.data.chunks(len) {
            for &v in row {
                data.push(v);
                data.push(v);
            }
        }
        let value = Tensor::from_vec(&[vx.shape[0], vx.shape[1], 2 * len], data)?;
        Ok(self.push(Op::UpsampleNearest2 { x }, value))
    }

    /// Mean squared error over the unmasked elements:
    /// `Σ mask·(pred − target)² / Σ mask`.
    pub fn mse_masked(&mut self, pred: ValId, target: &Tensor, mask: &Tensor) -> Result<ValId> {
        let vp = &self.node(pred)?.value;
        if vp.shape != target.shape || vp.shape != mask.shape {
            return Err(Error::DimMismatch {
                context: "mse_masked",
                expected: vp.numel(),
                actual: target.numel(),
            });
        }
        let mask_sum: f64 = mask.data.iter().sum();
        if mask_sum <= 0.0 {
            return Err(Error::InvalidInput("mse_masked mask selects no elements".into()));
        }
        let loss = vp
            .data
            .iter()
            .zip(&target.data)
            .zip(&mask.data)
            .map(|((&p, &t), &m)| m * (p - t) * (p - t))
            .sum::<f64>()
            / mask_sum;
        Ok(self.push(
            Op::MseMasked { pred, target: target.clone(), mask: mask.clone() },
            Tensor::scalar(loss),
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: ValId) -> Result<ValId> {
        let total = self.node(x)?.value.data.iter().sum();
        Ok(self.push(Op::Sum { x }, Tensor::scalar(total)))
    }

    /// Accumulate gradients of a scalar loss with respect to every node.
    ///
    /// Returns one gradient tensor per recorded node, aligned by id;
    /// nodes outside the loss's dependency cone have all-zero gradients.
    pub fn backward(&self, loss: ValId) -> Result<Vec<Tensor>> {
        let loss_node = self.node(loss)?;
        if !loss_node.value.is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(&n.value.shape))
            .collect();
        grads[loss.0].data[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if grads[id].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let dy = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv1d { x, w, b, stride, pad } => {
                    let d = self.conv_dims(*x, *w, *b, *stride, *pad)?;
                    let dx = ops::conv1d_backward_x(&dy.data, &self.nodes[w.0].value.data, &d);
                    let (dw, db) =
                        ops::conv1d_backward_w(&self.nodes[x.0].value.data, &dy.data, &d);
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[w.0], &dw);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::GroupNorm { x, gamma, beta, groups, eps, cache } => {
                    let xs = &self.nodes[x.0].value.shape;
                    let d = ops::GroupNormDims {
                        batch: xs[0],
                        channels: xs[1],
                        len: xs[2],
                        groups: *groups,
                        eps: *eps,
                    };
                    let (dx, dgamma, dbeta) = ops::group_norm_backward(
                        &self.nodes[x.0].value.data,
                        &self.nodes[gamma.0].value.data,
                        &dy.data,
                        cache,
                        &d,
                    );
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[gamma.0], &dgamma);
                    accumulate(&mut grads[beta.0], &dbeta);
                }
                Op::Silu { x } => {
                    let dx = ops::silu_backward(&self.nodes[x.0].value.data, &dy.data);
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], &dy.data);
                    accumulate(&mut grads[b.0], &dy.data);
                }
                Op::AddChannel { x, bias } => {
                    accumulate(&mut grads[x.0], &dy.data);
                    let bs = &self.nodes[bias.0].value.shape;
                    let len = self.nodes[x.0].value.shape[2];
                    let mut dbias = vec![0.0; bs[0] * bs[1]];
                    for (i, db) in dbias.iter_mut().enumerate() {
                        *db = dy.data[i * len..(i + 1) * len].iter().sum();
                    }
                    accumulate(&mut grads[bias.0], &dbias);
                }
                Op::Linear { x, w, b } => {
                    let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (batch, d_in, d_out) = (vx.shape[0], vx.shape[1], vw.shape[0]);
                    let (dx, dw, db) =
                        ops::linear_backward(&vx.data, &vw.data, &dy.data, batch, d_in, d_out);
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[w.0], &dw);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Embed { table, indices } => {
                    let dim = self.nodes[table.0].value.shape[1];
                    let dt = &mut grads[table.0];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..dim {
                            dt.data[idx * dim + j] += dy.data[row * dim + j];
                        }
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (sa, sb) = (
                        self.nodes[a.0].value.shape.clone(),
                        self.nodes[b.0].value.shape.clone(),
                    );
                    let (bsz, c1, c2, len) = (sa[0], sa[1], sb[1], sa[2]);
                    for bi in 0..bsz {
                        let src = bi * (c1 + c2) * len;
                        for (i, g) in grads[a.0].data[bi * c1 * len..(bi + 1) * c1 * len]
                            .iter_mut()
                            .enumerate()
                        {
                            *g += dy.data[src + i];
                        }
                        for (i, g) in grads[b.0].data[bi * c2 * len..(bi + 1) * c2 * len]
                            .iter_mut()
                            .enumerate()
                        {
                            *g += dy.data[src + c1 * len + i];
                        }
                    }
                }
                Op::UpsampleNearest2 { x } => {
                    let len = self.nodes[x.0].value.shape[2];
                    let rows = self.nodes[x.0].value.numel() / len;
                    for r in 0..rows {
                        for l in 0..len {
                            grads[x.0].data[r * len + l] +=
                                dy.data[r * 2 * len + 2 * l] + dy.data[r * 2 * len + 2 * l + 1];
                        }
                    }
                }
                Op::MseMasked { pred, target, mask } => {
                    let g0 = dy.data[0];
                    let mask_sum: f64 = mask.data.iter().sum();
                    let vp = &self.nodes[pred.0].value;
                    let dpred: Vec<f64> = vp
                        .data
                        .iter()
                        .zip(&target.data)
                        .zip(&mask.data)
                        .map(|((&p, &t), &m)| g0 * 2.0 * m * (p - t) / mask_sum)
                        .collect();
                    accumulate(&mut grads[pred.0], &dpred);
                }
                Op::Sum { x } => {
                    let g0 = dy.data[0];
                    for g in &mut grads[x.0].data {
                        *g += g0;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(dst: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(dst.data.len(), src.len());
    for (d, &s) in dst.data.iter_mut().zip(src) {
        *d += s;
    }
}
