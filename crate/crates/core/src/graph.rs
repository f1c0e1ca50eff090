//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and leaves
//! gradients on every leaf that was created with `requires_grad = true`.
//! A graph can be differentiated once; build a new one for the next pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Storage precision of node values.
///
/// `F32` rounds every recorded value (and leaf gradient) through `f32`,
/// emulating single-precision storage on top of the `f64` kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    AddBroadcast(Var, Var),
    /// `x · w + b`, `x: [.., in]`, `w: [in, out]`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    /// Eval-mode batch norm with frozen statistics.
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineRows {
        a: Var,
        b: Var,
        eps: f64,
    },
    StackCols(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
    fault: Option<String>,
    differentiated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn quantize(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
            fault: None,
            differentiated: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            quantize(value.data_mut());
        }
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Fails if any recorded value was non-finite.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    /// Smallest `|x|` fed into any ReLU so far (`inf` if none); finite
    /// differences are unreliable when this is below the step size.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Hash of the sign pattern of every ReLU input; two passes with equal
    /// patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                for v in self.value(x).data() {
                    h = (h ^ u64::from(*v > 0.0)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Batch statistics `(mean, biased variance)` of a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let t = self.value(x).scaled(alpha);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, alpha), rg)
    }

    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_broadcast", format!("{xs:?} + {bs:?}")));
        }
        let bv = self.value(b).data();
        let n = bv.len();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &bb) in chunk.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(x, b), rg))
    }

    /// Affine map over the last axis; `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape("linear", format!("x {xs:?} w {ws:?}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for out {dout}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nn(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        let t = Tensor::new(vec![bsz, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| z.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| gelu(z)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().unwrap_or(&1);
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let d = *v.shape().last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", format!("{:?}", v.shape())));
        }
        let rows = v.len() / d;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Training-mode batch normalization of `[B, C, ..]` over every axis but `C`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (b, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        let v = self.value(x).data();
        let count = (b * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let o = (bi * c + ch) * inner;
                s += v[o..o + inner].iter().sum::<f64>();
            }
            let m = s / count;
            let mut q = 0.0;
            for bi in 0..b {
                let o = (bi * c + ch) * inner;
                q += v[o..o + inner].iter().map(|z| (z - m) * (z - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = q / count;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize_channels(x, gamma, beta, &mean, &rstd, b, c, inner);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_mean: mean,
                batch_var: var,
            },
            rg,
        ))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, inner) = self.channel_layout("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm_eval", "running stats length"));
        }
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize_channels(x, gamma, beta, running_mean, &rstd, b, c, inner);
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn channel_layout(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(op, format!("{s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(op, format!("affine for {c} channels")));
        }
        Ok((b, c, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_channels(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        rstd: &[f64],
        b: usize,
        c: usize,
        inner: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let v = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * inner;
                for i in o..o + inner {
                    let xh = (v[i] - mean[ch]) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + be[ch];
                }
            }
        }
        (xhat, out)
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?} w {ws:?}")));
        }
        let geo = ConvGeometry::new(&xs, &ws, stride, pad)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; geo.b * geo.o * geo.spatial()];
        let mut cols = vec![0.0; geo.ckk() * geo.spatial()];
        for bi in 0..geo.b {
            geo.im2col(&xv[bi * geo.in_len()..(bi + 1) * geo.in_len()], &mut cols);
            let ob = &mut out[bi * geo.o * geo.spatial()..(bi + 1) * geo.o * geo.spatial()];
            gemm_nn(wv, &cols, ob, geo.o, geo.ckk(), geo.spatial());
        }
        let t = Tensor::new(vec![geo.b, geo.o, geo.ho, geo.wo], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{s:?} by {axes:?}")));
        }
        let data = permute_data(self.value(x).data(), &s, axes);
        let shape = axes.iter().map(|&a| s[a]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("{s:?} axis {axis}")));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|z| *z *= inv);
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MeanAxis { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean negative log-softmax at the true class; `logits: [m, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} labels {}", labels.len()),
            ));
        }
        let (m, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let v = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for r in 0..m {
            let row = &v[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            // log-sum-exp minus the shifted true logit; exact ln(k) for k tied maxima
            total += z.ln() - (row[labels[r]] - max);
        }
        let t = Tensor::scalar(total / m as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-wise cosine similarity of two `[m, d]` tensors, norms regularized as `sqrt(|x|² + eps²)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("cosine_rows", format!("{s:?}")));
        }
        let (m, d) = (s[0], s[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = (0..m)
            .map(|r| {
                let ar = &av[r * d..(r + 1) * d];
                let br = &bv[r * d..(r + 1) * d];
                let (na, nb) = (reg_norm(ar, eps), reg_norm(br, eps));
                crate::tensor::dot(ar, br) / (na * nb)
            })
            .collect();
        let t = Tensor::new(vec![m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::CosineRows { a, b, eps }, rg))
    }

    /// Stacks two `[m]` vectors into an `[m, 2]` matrix.
    pub fn stack_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("stack_cols", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 1 {
            return Err(Error::shape("stack_cols", format!("{s:?}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av.iter().zip(bv).flat_map(|(&x, &y)| [x, y]).collect();
        let t = Tensor::new(vec![s[0], 2], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::StackCols(a, b), rg))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Gradients are written fresh on each graph; accumulation across
    /// minibatches is the caller's job.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        self.check()?;
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarBackward(shape.to_vec()));
        }
        self.differentiated = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy, &mut grads)?;
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if let Some(g) = g {
                if self.precision == Precision::F32 {
                    quantize(g);
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("gradient of node {i}"),
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(grads, v, gy.len(), |g| add_into(g, gy));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    accumulate(grads, *a, gy.len(), |g| {
                        for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                            *g += d * o;
                        }
                    });
                }
                if rg(*b) {
                    accumulate(grads, *b, gy.len(), |g| {
                        for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                            *g += d * o;
                        }
                    });
                }
            }
            Op::Scale(x, alpha) => {
                accumulate(grads, *x, gy.len(), |g| {
                    for (g, &d) in g.iter_mut().zip(gy) {
                        *g += alpha * d;
                    }
                });
            }
            Op::AddBroadcast(x, b) => {
                if rg(*x) {
                    accumulate(grads, *x, gy.len(), |g| add_into(g, gy));
                }
                if rg(*b) {
                    let n = val(*b).len();
                    accumulate(grads, *b, n, |g| {
                        for chunk in gy.chunks(n) {
                            add_into(g, chunk);
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (din, dout) = (ws[0], ws[1]);
                let rows = gy.len() / dout;
                if rg(*x) {
                    accumulate(grads, *x, rows * din, |g| {
                        gemm_nt(gy, val(*w), g, rows, dout, din);
                    });
                }
                if rg(*w) {
                    accumulate(grads, *w, din * dout, |g| {
                        gemm_tn(val(*x), gy, g, din, rows, dout);
                    });
                }
                if let Some(b) = b {
                    if rg(*b) {
                        accumulate(grads, *b, dout, |g| {
                            for chunk in gy.chunks(dout) {
                                add_into(g, chunk);
                            }
                        });
                    }
                }
            }
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    accumulate(grads, *a, m * k, |g| gemm_nt(gy, val(*b), g, m, n, k));
                }
                if rg(*b) {
                    accumulate(grads, *b, k * n, |g| gemm_tn(val(*a), gy, g, k, m, n));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if rg(*a) {
                    accumulate(grads, *a, bsz * m * k, |g| {
                        for i in 0..bsz {
                            let gyb = &gy[i * m * n..(i + 1) * m * n];
                            let bb = &bv[i * k * n..(i + 1) * k * n];
                            let gb = &mut g[i * m * k..(i + 1) * m * k];
                            if *trans_b {
                                gemm_nn(gyb, bb, gb, m, n, k);
                            } else {
                                gemm_nt(gyb, bb, gb, m, n, k);
                            }
                        }
                    });
                }
                if rg(*b) {
                    accumulate(grads, *b, bsz * k * n, |g| {
                        for i in 0..bsz {
                            let gyb = &gy[i * m * n..(i + 1) * m * n];
                            let ab = &av[i * m * k..(i + 1) * m * k];
                            let gb = &mut g[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                gemm_tn(gyb, ab, gb, n, m, k);
                            } else {
                                gemm_tn(ab, gyb, gb, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                accumulate(grads, *x, gy.len(), |g| {
                    for ((g, &d), &z) in g.iter_mut().zip(gy).zip(xv) {
                        if z > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                accumulate(grads, *x, gy.len(), |g| {
                    for ((g, &d), &z) in g.iter_mut().zip(gy).zip(xv) {
                        *g += d * gelu_grad(z);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                accumulate(grads, *x, gy.len(), |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gv = val(*gamma);
                if rg(*x) {
                    accumulate(grads, *x, gy.len(), |g| {
                        let mut dxh = vec![0.0; d];
                        for (r, rs) in rstd.iter().enumerate() {
                            let o = r * d;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                dxh[j] = gy[o + j] * gv[j];
                                m1 += dxh[j];
                                m2 += dxh[j] * xhat[o + j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                g[o + j] += rs * (dxh[j] - m1 - xhat[o + j] * m2);
                            }
                        }
                    });
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, d, |g| {
                        for (dr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                g[j] += dr[j] * xr[j];
                            }
                        }
                    });
                }
                if rg(*beta) {
                    accumulate(grads, *beta, d, |g| {
                        for dr in gy.chunks(d) {
                            add_into(g, dr);
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                ..
            } => {
                let s = node.value.shape();
                let (b, c) = (s[0], s[1]);
                let inner = node.value.len() / (b * c);
                let count = (b * inner) as f64;
                let gv = val(*gamma);
                let (dgamma, dbeta) = channel_sums(gy, xhat, b, c, inner);
                if rg(*x) {
                    accumulate(grads, *x, gy.len(), |g| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let o = (bi * c + ch) * inner;
                                let k = gv[ch] * rstd[ch];
                                let m1 = dbeta[ch] / count;
                                let m2 = dgamma[ch] / count;
                                for i in o..o + inner {
                                    g[i] += k * (gy[i] - m1 - xhat[i] * m2);
                                }
                            }
                        }
                    });
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, c, |g| add_into(g, &dgamma));
                }
                if rg(*beta) {
                    accumulate(grads, *beta, c, |g| add_into(g, &dbeta));
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let s = node.value.shape();
                let (b, c) = (s[0], s[1]);
                let inner = node.value.len() / (b * c);
                let gv = val(*gamma);
                let (dgamma, dbeta) = channel_sums(gy, xhat, b, c, inner);
                if rg(*x) {
                    accumulate(grads, *x, gy.len(), |g| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let o = (bi * c + ch) * inner;
                                let k = gv[ch] * rstd[ch];
                                for i in o..o + inner {
                                    g[i] += k * gy[i];
                                }
                            }
                        }
                    });
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, c, |g| add_into(g, &dgamma));
                }
                if rg(*beta) {
                    accumulate(grads, *beta, c, |g| add_into(g, &dbeta));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let geo = ConvGeometry::new(xs, ws, *stride, *pad)?;
                let (xv, wv) = (val(*x), val(*w));
                let sp = geo.spatial();
                let mut cols = vec![0.0; geo.ckk() * sp];
                let mut dw = if rg(*w) { Some(vec![0.0; wv.len()]) } else { None };
                let mut dx = if rg(*x) { Some(vec![0.0; xv.len()]) } else { None };
                for bi in 0..geo.b {
                    let gyb = &gy[bi * geo.o * sp..(bi + 1) * geo.o * sp];
                    if let Some(dw) = dw.as_mut() {
                        geo.im2col(&xv[bi * geo.in_len()..(bi + 1) * geo.in_len()], &mut cols);
                        gemm_nt(gyb, &cols, dw, geo.o, sp, geo.ckk());
                    }
                    if let Some(dx) = dx.as_mut() {
                        cols.iter_mut().for_each(|z| *z = 0.0);
                        gemm_tn(wv, gyb, &mut cols, geo.ckk(), geo.o, sp);
                        geo.col2im(&cols, &mut dx[bi * geo.in_len()..(bi + 1) * geo.in_len()]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw.len(), |g| add_into(g, &dw));
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx.len(), |g| add_into(g, &dx));
                }
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, gy.len(), |g| add_into(g, gy));
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let back = permute_data(gy, node.value.shape(), &inv);
                accumulate(grads, *x, gy.len(), |g| add_into(g, &back));
            }
            Op::MeanAxis { x, axis } => {
                let s = self.nodes[x.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let n = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let inv = 1.0 / n as f64;
                accumulate(grads, *x, outer * n * inner, |g| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                g[base + i] += gy[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, n, |g| g.iter_mut().for_each(|z| *z += gy[0]));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = labels.len();
                let c = probs.len() / m;
                let k = gy[0] / m as f64;
                accumulate(grads, *logits, probs.len(), |g| {
                    for r in 0..m {
                        for j in 0..c {
                            let t = if j == labels[r] { 1.0 } else { 0.0 };
                            g[r * c + j] += k * (probs[r * c + j] - t);
                        }
                    }
                });
            }
            Op::CosineRows { a, b, eps } => {
                let s = self.nodes[a.0].value.shape();
                let (m, d) = (s[0], s[1]);
                let (av, bv) = (val(*a), val(*b));
                let cos = node.value.data();
                for (this, other, flag) in [(*a, bv, true), (*b, av, false)] {
                    if !rg(this) {
                        continue;
                    }
                    let own = if flag { av } else { bv };
                    accumulate(grads, this, m * d, |g| {
                        for r in 0..m {
                            let orow = &own[r * d..(r + 1) * d];
                            let prow = &other[r * d..(r + 1) * d];
                            let (no, np) = (reg_norm(orow, *eps), reg_norm(prow, *eps));
                            for j in 0..d {
                                g[r * d + j] +=
                                    gy[r] * (prow[j] / (no * np) - cos[r] * orow[j] / (no * no));
                            }
                        }
                    });
                }
            }
            Op::StackCols(a, b) => {
                let m = gy.len() / 2;
                if rg(*a) {
                    accumulate(grads, *a, m, |g| {
                        for r in 0..m {
                            g[r] += gy[2 * r];
                        }
                    });
                }
                if rg(*b) {
                    accumulate(grads, *b, m, |g| {
                        for r in 0..m {
                            g[r] += gy[2 * r + 1];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBroadcast(..) => "add_broadcast",
        Op::Linear { .. } => "linear",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BatchNorm { .. } => "batch_norm",
        Op::ChannelAffine { .. } => "batch_norm_eval",
        Op::Conv2d { .. } => "conv2d",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::MeanAxis { .. } => "mean_axis",
        Op::Sum(_) => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::CosineRows { .. } => "cosine_rows",
        Op::StackCols(..) => "stack_cols",
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (g, &d) in g.iter_mut().zip(d) {
        *g += d;
    }
}

fn channel_sums(gy: &[f64], xhat: &[f64], b: usize, c: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * inner;
            for i in o..o + inner {
                dgamma[ch] += gy[i] * xhat[i];
                dbeta[ch] += gy[i];
            }
        }
    }
    (dgamma, dbeta)
}

fn reg_norm(x: &[f64], eps: f64) -> f64 {
    (crate::tensor::dot(x, x) + eps * eps).sqrt()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct ConvGeometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        Ok(Self {
            b,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let sp = self.spatial();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * sp..(row + 1) * sp];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.wo + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                x[(ch * self.h + ii as usize) * self.w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let sp = self.spatial();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * sp..(row + 1) * sp];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            dx[(ch * self.h + ii as usize) * self.w + jj as usize] +=
                                src[oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_times_w_gives_zero_grad() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let z = g.scale(w, 0.0);
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(w), Err(Error::NonScalarBackward(_))));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![1], vec![f64::MAX]).unwrap(), true);
        let big = g.scale(w, 10.0);
        let s = g.sum(big);
        assert!(matches!(g.check(), Err(Error::NonFinite { .. })));
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 10]));
        let l = g.cross_entropy(z, &[3, 7]).unwrap();
        assert!((g.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 10];
        logits[4] = 100.0;
        let z = g.constant(Tensor::new(vec![1, 10], logits).unwrap());
        let l = g.cross_entropy(z, &[4]).unwrap();
        let v = g.value(l).data()[0];
        assert!((0.0..1e-8).contains(&v));

        assert!(matches!(
            g.cross_entropy(z, &[10]),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.leaf(Tensor::new(vec![2, 3, 4], data.clone()).unwrap(), true);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] == x[i, j, k]
        assert_eq!(g.value(p).data()[1 * 6 + 0 * 3 + 2], data[0 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 40.0]).unwrap());
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.leaf(Tensor::new(vec![1], vec![0.1]).unwrap(), false);
        assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
    }
}
