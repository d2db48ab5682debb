//! Reverse-mode differentiation record.
//!
//! A [`Tape`] is built for one training or adaptation step and dropped
//! afterwards. Nodes are appended in evaluation order, so the append order is
//! already a topological order and [`Tape::backward`] is a single reverse scan.

use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::resample::ResamplePlan;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Border handling for same-size convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Replicate,
    Zero,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Normalization statistics for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Tensor, var: Tensor },
}

/// Per-channel statistics of the batch that was normalized in batch mode.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    /// Biased variance (divides by the element count).
    pub var: Vec<f32>,
    pub count: usize,
}

pub const BN_EPS: f32 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScalarMul {
        s: Var,
        x: Var,
    },
    AddBcast {
        x: Var,
        b: Var,
    },
    MulBcast {
        x: Var,
        m: Var,
    },
    Relu(Var),
    Log {
        x: Var,
        floor: f32,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        pad: Padding,
    },
    DwConv2d {
        x: Var,
        k: Var,
        pad: Padding,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    MeanRows(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    CosineRows {
        a: Var,
        b: Var,
    },
    CosineMatrix(Var),
    NtXent {
        s: Var,
        positives: Arc<Vec<bool>>,
        tau: f32,
    },
    Resample {
        x: Var,
        plan: Arc<ResamplePlan>,
    },
    LowRank {
        u: Var,
        s: Var,
        vt: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// The differentiation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Var>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Every handle that was registered with [`Tape::param`].
    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

fn sum_f64(xs: &[f32]) -> f64 {
    xs.iter().map(|&v| v as f64).sum()
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(shape_err(op, format!("expected N×C×H×W, got {s:?}"))),
    }
}

fn add_into(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into_owned(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false, false)
    }

    /// Records a trainable value.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg, false)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `s · x` for a one-element `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul", format!("scale has shape {:?}", self.value(s).shape())));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::ScalarMul { s, x }, &[s, x]))
    }

    fn trailing_len(op: &'static str, x: &Tensor, b: &Tensor) -> Result<usize> {
        let (xs, bs) = (x.shape(), b.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err(op, format!("{bs:?} does not broadcast over {xs:?}")));
        }
        Ok(b.len())
    }

    /// `x + b` with `b` broadcast over the leading axes of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let bl = Self::trailing_len("add_bcast", self.value(x), self.value(b))?;
        let bd = self.value(b).data();
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().enumerate().map(|(i, &v)| v + bd[i % bl]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBcast { x, b }, &[x, b]))
    }

    /// `x ⊙ m` with `m` broadcast over the leading axes of `x`.
    pub fn mul_bcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let ml = Self::trailing_len("mul_bcast", self.value(x), self.value(m))?;
        let md = self.value(m).data();
        let xv = self.value(x);
        let data: Vec<f32> = xv.data().iter().enumerate().map(|(i, &v)| v * md[i % ml]).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulBcast { x, m }, &[x, m]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Natural log with inputs floored at `floor`.
    pub fn log(&mut self, x: Var, floor: f32) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::Log { x, floor }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum() as f32);
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean() as f32);
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        self.push(Tensor::scalar(s as f32), Op::SumSquares(x), &[x])
    }

    /// Column means of an `[n, m]` matrix, giving `[m]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols("mean_rows", self.value(x))?;
        let d = self.value(x).data();
        let mut acc = vec![0.0f64; m];
        for r in 0..n {
            for (a, &v) in acc.iter_mut().zip(&d[r * m..(r + 1) * m]) {
                *a += v as f64;
            }
        }
        let out = Tensor::new(vec![m], acc.into_iter().map(|v| (v / n as f64) as f32).collect::<Vec<_>>())?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rows_cols("matmul", self.value(a))?;
        let (k2, m) = rows_cols("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    // ---- image ops ---------------------------------------------------------

    /// Stride-1 same-size convolution; `w` is `[cout, cin, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: Padding) -> Result<Var> {
        let (n, cin, h, wd) = nchw("conv2d", self.value(x))?;
        let (cout, cin2, k) = match self.value(w).shape() {
            [co, ci, k1, k2] if k1 == k2 => (*co, *ci, *k1),
            s => return Err(shape_err("conv2d", format!("kernel must be [cout,cin,k,k], got {s:?}"))),
        };
        if cin != cin2 {
            return Err(shape_err("conv2d", format!("input has {cin} channels, kernel expects {cin2}")));
        }
        if k % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel size {k} must be odd")));
        }
        if h < k || wd < k {
            return Err(shape_err("conv2d", format!("spatial extent {h}x{wd} smaller than kernel {k}")));
        }
        let d = ConvDims { n, cin, cout, h, w: wd, k };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &d, pad);
        let out = Tensor::new(vec![n, cout, h, wd], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, pad }, &[x, w]))
    }

    /// A single `[k, k]` kernel applied independently to every channel.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, pad: Padding) -> Result<Var> {
        let (n, c, h, w) = nchw("depthwise_conv2d", self.value(x))?;
        let k = match self.value(kernel).shape() {
            [a, b] if a == b => *a,
            s => return Err(shape_err("depthwise_conv2d", format!("kernel must be [k,k], got {s:?}"))),
        };
        if k % 2 == 0 {
            return Err(shape_err("depthwise_conv2d", format!("kernel size {k} must be odd")));
        }
        if h < k || w < k {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("spatial extent {h}x{w} smaller than kernel {k}"),
            ));
        }
        let out = kernels::depthwise_forward(self.value(x).data(), n * c, h, w, self.value(kernel).data(), k, pad);
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::DwConv2d { x, k: kernel, pad }, &[x, kernel]))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("max_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("max_pool2", format!("odd spatial extent {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = (2 * y) * w + 2 * xo;
                    for cand in [(2 * y) * w + 2 * xo + 1, (2 * y + 1) * w + 2 * xo, (2 * y + 1) * w + 2 * xo + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    let o = p * ho * wo + y * wo + xo;
                    out[o] = plane[best];
                    argmax[o] = (p * h * w + best) as u32;
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_avg_pool", self.value(x))?;
        let hw = h * w;
        let d = self.value(x).data();
        let out: Vec<f32> = (0..n * c).map(|p| (sum_f64(&d[p * hw..(p + 1) * hw]) / hw as f64) as f32).collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Batch normalization over `[n, c, h, w]` with affine `gamma`, `beta` of
    /// shape `[c]`. In batch mode the batch moments are returned so the caller
    /// can update running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &BnStats) -> Result<(Var, Option<BatchMoments>)> {
        let (n, c, h, w) = nchw("batch_norm", self.value(x))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.value(x).data();
        let (mean, var, batch) = match stats {
            BnStats::Batch => {
                if n < 2 {
                    return Err(Error::InvalidArgument("batch statistics need a batch of at least 2".into()));
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for i in 0..n {
                        for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            s += v as f64;
                        }
                    }
                    let m = s / count as f64;
                    for i in 0..n {
                        for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            let d = v as f64 - m;
                            s2 += d * d;
                        }
                    }
                    mean[ch] = m as f32;
                    var[ch] = (s2 / count as f64) as f32;
                }
                (mean, var, true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(shape_err("batch_norm", "running statistics do not match channel count"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let moments = batch.then_some(BatchMoments { mean, var, count });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            &[x, gamma, beta],
        );
        Ok((v, moments))
    }

    /// Bilinear resampling through a fixed sampling plan.
    pub fn resample(&mut self, x: Var, plan: Arc<ResamplePlan>) -> Result<Var> {
        let out = plan.apply(self.value(x))?;
        Ok(self.push(out, Op::Resample { x, plan }, &[x]))
    }

    /// Batched `U · diag(S) · Vt` with `U: [b, h, r]`, `S: [b, r]`, `Vt: [b, r, w]`.
    pub fn low_rank(&mut self, u: Var, s: Var, vt: Var) -> Result<Var> {
        let (b, h, r) = match self.value(u).shape() {
            [b, h, r] => (*b, *h, *r),
            sh => return Err(shape_err("low_rank", format!("U must be [b,h,r], got {sh:?}"))),
        };
        let w = match self.value(vt).shape() {
            [b2, r2, w] if *b2 == b && *r2 == r => *w,
            sh => return Err(shape_err("low_rank", format!("Vt must be [{b},{r},w], got {sh:?}"))),
        };
        if self.value(s).shape() != [b, r] {
            return Err(shape_err(
                "low_rank",
                format!("S must be [{b},{r}], got {:?}", self.value(s).shape()),
            ));
        }
        let (ud, sd, vd) = (self.value(u).data(), self.value(s).data(), self.value(vt).data());
        let mut out = vec![0.0f32; b * h * w];
        for bi in 0..b {
            // (U · diag S) then times Vt
            let mut us = vec![0.0f32; h * r];
            for i in 0..h {
                for k in 0..r {
                    us[i * r + k] = ud[bi * h * r + i * r + k] * sd[bi * r + k];
                }
            }
            kernels::gemm(
                h,
                r,
                w,
                &us,
                false,
                &vd[bi * r * w..(bi + 1) * r * w],
                false,
                0.0,
                &mut out[bi * h * w..(bi + 1) * h * w],
            );
        }
        let out = Tensor::new(vec![b, h, w], out)?;
        Ok(self.push(out, Op::LowRank { u, s, vt }, &[u, s, vt]))
    }

    // ---- classification / embedding losses -----------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = rows_cols("softmax", self.value(x))?;
        let out = Tensor::new(vec![n, c], softmax_rows(self.value(x).data(), n, c))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = rows_cols("log_softmax", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &d[r * c..(r + 1) * c];
            let lse = log_sum_exp(row.iter().map(|&v| v as f64));
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v as f64 - lse) as f32;
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Mean cross-entropy of `[n, c]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = rows_cols("cross_entropy", self.value(logits))?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let probs = softmax_rows(d, n, c);
        let mut loss = 0.0f64;
        for (r, &l) in labels.iter().enumerate() {
            let row = &d[r * c..(r + 1) * c];
            let lse = log_sum_exp(row.iter().map(|&v| v as f64));
            loss += lse - row[l] as f64;
        }
        let out = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row-wise unit normalization; zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, d) = rows_cols("l2_normalize", self.value(x))?;
        let xd = self.value(x).data();
        let norms = row_norms(xd, n, d);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            if norms[r] > 0.0 {
                for j in 0..d {
                    out[r * d + j] = xd[r * d + j] / norms[r];
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Cosine similarity of matching rows of two `[n, d]` matrices, giving `[n]`.
    /// A zero row has similarity 0 with anything.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("cosine_rows", self.value(a), self.value(b))?;
        let (n, d) = rows_cols("cosine_rows", self.value(a))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (row_norms(ad, n, d), row_norms(bd, n, d));
        let out: Vec<f32> = (0..n)
            .map(|r| {
                if na[r] == 0.0 || nb[r] == 0.0 {
                    0.0
                } else {
                    let dot: f64 = (0..d).map(|j| ad[r * d + j] as f64 * bd[r * d + j] as f64).sum();
                    (dot / (na[r] as f64 * nb[r] as f64)) as f32
                }
            })
            .collect();
        let out = Tensor::new(vec![n], out)?;
        Ok(self.push(out, Op::CosineRows { a, b }, &[a, b]))
    }

    /// All-pairs cosine similarity of the rows of `[m, d]`, giving `[m, m]`.
    pub fn cosine_matrix(&mut self, z: Var) -> Result<Var> {
        let (m, d) = rows_cols("cosine_matrix", self.value(z))?;
        let zh = unit_rows(self.value(z).data(), m, d);
        let mut out = vec![0.0f32; m * m];
        kernels::gemm(m, d, m, &zh, false, &zh, true, 0.0, &mut out);
        let norms = row_norms(self.value(z).data(), m, d);
        for i in 0..m {
            if norms[i] > 0.0 {
                out[i * m + i] = 1.0;
            }
        }
        let out = Tensor::new(vec![m, m], out)?;
        Ok(self.push(out, Op::CosineMatrix(z), &[z]))
    }

    /// Temperature-scaled contrastive loss over a similarity matrix.
    ///
    /// For each positive pair `(i, j)` the term is
    /// `-(s_ij/τ - log Σ_{k≠i} exp(s_ik/τ))`; the result averages over all
    /// positive pairs. Anchors without positives contribute nothing.
    pub fn nt_xent(&mut self, s: Var, positives: Arc<Vec<bool>>, tau: f32) -> Result<Var> {
        let (m, m2) = rows_cols("nt_xent", self.value(s))?;
        if m != m2 || positives.len() != m * m {
            return Err(shape_err(
                "nt_xent",
                format!("similarity [{m},{m2}] with indicator of {} entries", positives.len()),
            ));
        }
        if tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let sd = self.value(s).data();
        let t = tau as f64;
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for i in 0..m {
            let npos = (0..m).filter(|&j| j != i && positives[i * m + j]).count();
            if npos == 0 {
                continue;
            }
            let lse = log_sum_exp((0..m).filter(|&k| k != i).map(|k| sd[i * m + k] as f64 / t));
            for j in 0..m {
                if j != i && positives[i * m + j] {
                    total += lse - sd[i * m + j] as f64 / t;
                    pairs += 1;
                }
            }
        }
        let loss = if pairs == 0 { 0.0 } else { total / pairs as f64 };
        Ok(self.push(Tensor::scalar(loss as f32), Op::NtXent { s, positives, tau }, &[s]))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params: Vec<Var> = (0..n).filter(|&i| self.nodes[i].trainable).map(Var).collect();
        // Only parameters keep their gradients.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].trainable {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    add_into_owned(&mut grads[a.0], g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.rg(*b) {
                    add_into_owned(&mut grads[b.0], g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    add_into_owned(&mut grads[a.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::ScalarMul { s, x } => {
                let xv = self.value(*x).data();
                if self.rg(*s) {
                    let d: f64 = g.iter().zip(xv).map(|(&g, &x)| g as f64 * x as f64).sum();
                    add_into(&mut grads[s.0], &[d as f32]);
                }
                if self.rg(*x) {
                    let c = self.value(*s).item();
                    add_into_owned(&mut grads[x.0], g.iter().map(|v| v * c).collect());
                }
            }
            Op::AddBcast { x, b } => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.rg(*b) {
                    let bl = self.value(*b).len();
                    let mut acc = vec![0.0f64; bl];
                    for (i, &v) in g.iter().enumerate() {
                        acc[i % bl] += v as f64;
                    }
                    add_into_owned(&mut grads[b.0], acc.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::MulBcast { x, m } => {
                let md = self.value(*m).data();
                let ml = md.len();
                if self.rg(*x) {
                    add_into_owned(&mut grads[x.0], g.iter().enumerate().map(|(i, v)| v * md[i % ml]).collect());
                }
                if self.rg(*m) {
                    let xd = self.value(*x).data();
                    let mut acc = vec![0.0f64; ml];
                    for (i, (&gv, &xv)) in g.iter().zip(xd).enumerate() {
                        acc[i % ml] += gv as f64 * xv as f64;
                    }
                    add_into_owned(&mut grads[m.0], acc.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let xd = self.value(*x).data();
                    add_into_owned(
                        &mut grads[x.0],
                        g.iter().zip(xd).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect(),
                    );
                }
            }
            Op::Log { x, floor } => {
                if self.rg(*x) {
                    let xd = self.value(*x).data();
                    add_into_owned(
                        &mut grads[x.0],
                        g.iter().zip(xd).map(|(&g, &x)| if x > *floor { g / x } else { 0.0 }).collect(),
                    );
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.rg(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&gv, &src) in g.iter().zip(argmax) {
                        dx[src as usize] += gv;
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f32;
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (p, &gv) in g.iter().enumerate() {
                        dx[p * hw..(p + 1) * hw].fill(gv * inv);
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let m = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g, false, self.value(*b).data(), true, 0.0, &mut da);
                    add_into_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    kernels::gemm(k, n, m, self.value(*a).data(), true, g, false, 0.0, &mut db);
                    add_into_owned(&mut grads[b.0], db);
                }
            }
            Op::Conv2d { x, w, pad } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let d = ConvDims {
                    n: xs[0],
                    cin: xs[1],
                    cout: ws[0],
                    h: xs[2],
                    w: xs[3],
                    k: ws[2],
                };
                let (dx, dw) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g, &d, *pad, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    add_into_owned(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    add_into_owned(&mut grads[w.0], dw);
                }
            }
            Op::DwConv2d { x, k, pad } => {
                let xs = self.value(*x).shape();
                let ks = self.value(*k).shape()[0];
                let (dx, dk) = kernels::depthwise_backward(
                    self.value(*x).data(),
                    xs[0] * xs[1],
                    xs[2],
                    xs[3],
                    self.value(*k).data(),
                    ks,
                    *pad,
                    g,
                    self.rg(*x),
                    self.rg(*k),
                );
                if let Some(dx) = dx {
                    add_into_owned(&mut grads[x.0], dx);
                }
                if let Some(dk) = dk {
                    add_into_owned(&mut grads[k.0], dk);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let xs = self.value(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j] as f64;
                            sum_gx[ch] += g[j] as f64 * xhat[j] as f64;
                        }
                    }
                }
                if self.rg(*gamma) {
                    add_into_owned(&mut grads[gamma.0], sum_gx.iter().map(|&v| v as f32).collect());
                }
                if self.rg(*beta) {
                    add_into_owned(&mut grads[beta.0], sum_g.iter().map(|&v| v as f32).collect());
                }
                if self.rg(*x) {
                    let gm = self.value(*gamma).data();
                    let cnt = (n * hw) as f64;
                    let mut dx = vec![0.0f32; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let scale = gm[ch] as f64 * inv_std[ch] as f64;
                            for j in base..base + hw {
                                dx[j] = if *batch {
                                    (scale * (g[j] as f64 - sum_g[ch] / cnt - xhat[j] as f64 * sum_gx[ch] / cnt)) as f32
                                } else {
                                    (scale * g[j] as f64) as f32
                                };
                            }
                        }
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for j in row {
                            dx[j] = (y[j] as f64 * (g[j] as f64 - dot)) as f32;
                        }
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let gs = sum_f64(&g[row.clone()]);
                        for j in row {
                            dx[j] = (g[j] as f64 - (y[j] as f64).exp() * gs) as f32;
                        }
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.rg(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let s = g[0] / n as f32;
                    let mut dx: Vec<f32> = probs.iter().map(|p| p * s).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * c + l] -= s;
                    }
                    add_into_owned(&mut grads[logits.0], dx);
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    add_into_owned(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    add_into_owned(&mut grads[x.0], vec![g[0] / n as f32; n]);
                }
            }
            Op::SumSquares(x) => {
                if self.rg(*x) {
                    add_into_owned(&mut grads[x.0], self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect());
                }
            }
            Op::MeanRows(x) => {
                if self.rg(*x) {
                    let (n, m) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let inv = 1.0 / n as f32;
                    let dx: Vec<f32> = (0..n * m).map(|i| g[i % m] * inv).collect();
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let d = node.value.shape()[1];
                    let mut dx = vec![0.0; y.len()];
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr == 0.0 {
                            continue;
                        }
                        let row = r * d..(r + 1) * d;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a as f64 * b as f64).sum();
                        for j in row {
                            dx[j] = ((g[j] as f64 - y[j] as f64 * dot) / nr as f64) as f32;
                        }
                    }
                    add_into_owned(&mut grads[x.0], dx);
                }
            }
            Op::CosineRows { a, b } => {
                let (n, d) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (ah, bh) = (unit_rows(ad, n, d), unit_rows(bd, n, d));
                let (na, nb) = (row_norms(ad, n, d), row_norms(bd, n, d));
                let cos = node.value.data();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for r in 0..n {
                    if na[r] == 0.0 || nb[r] == 0.0 {
                        continue;
                    }
                    for j in r * d..(r + 1) * d {
                        da[j] = g[r] * (bh[j] - cos[r] * ah[j]) / na[r];
                        db[j] = g[r] * (ah[j] - cos[r] * bh[j]) / nb[r];
                    }
                }
                if self.rg(*a) {
                    add_into_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    add_into_owned(&mut grads[b.0], db);
                }
            }
            Op::CosineMatrix(z) => {
                if self.rg(*z) {
                    let (m, d) = (self.value(*z).shape()[0], self.value(*z).shape()[1]);
                    let zd = self.value(*z).data();
                    let zh = unit_rows(zd, m, d);
                    let norms = row_norms(zd, m, d);
                    let s = node.value.data();
                    // symmetric upstream with the (constant) diagonal removed
                    let mut gs = vec![0.0f32; m * m];
                    for i in 0..m {
                        for j in 0..m {
                            if i != j {
                                gs[i * m + j] = g[i * m + j] + g[j * m + i];
                            }
                        }
                    }
                    let mut dz = vec![0.0f32; m * d];
                    kernels::gemm(m, m, d, &gs, false, &zh, false, 0.0, &mut dz);
                    for i in 0..m {
                        if norms[i] == 0.0 {
                            dz[i * d..(i + 1) * d].fill(0.0);
                            continue;
                        }
                        let w: f64 = (0..m).map(|j| gs[i * m + j] as f64 * s[i * m + j] as f64).sum();
                        for k in 0..d {
                            dz[i * d + k] = ((dz[i * d + k] as f64 - w * zh[i * d + k] as f64) / norms[i] as f64) as f32;
                        }
                    }
                    add_into_owned(&mut grads[z.0], dz);
                }
            }
            Op::NtXent { s, positives, tau } => {
                if self.rg(*s) {
                    let m = self.value(*s).shape()[0];
                    let sd = self.value(*s).data();
                    let t = *tau as f64;
                    let pairs: usize = (0..m).map(|i| (0..m).filter(|&j| j != i && positives[i * m + j]).count()).sum();
                    let mut ds = vec![0.0f32; m * m];
                    if pairs > 0 {
                        let scale = g[0] as f64 / pairs as f64;
                        for i in 0..m {
                            let npos = (0..m).filter(|&j| j != i && positives[i * m + j]).count();
                            if npos == 0 {
                                continue;
                            }
                            let lse = log_sum_exp((0..m).filter(|&k| k != i).map(|k| sd[i * m + k] as f64 / t));
                            for k in 0..m {
                                if k == i {
                                    continue;
                                }
                                let p = (sd[i * m + k] as f64 / t - lse).exp();
                                let y = if positives[i * m + k] { 1.0 } else { 0.0 };
                                ds[i * m + k] = (scale * (npos as f64 * p - y) / t) as f32;
                            }
                        }
                    }
                    add_into_owned(&mut grads[s.0], ds);
                }
            }
            Op::Resample { x, plan } => {
                if self.rg(*x) {
                    add_into_owned(&mut grads[x.0], plan.adjoint(g, self.value(*x).len()));
                }
            }
            Op::LowRank { u, s, vt } => {
                let us = self.value(*u).shape();
                let (b, h, r) = (us[0], us[1], us[2]);
                let w = self.value(*vt).shape()[2];
                let (ud, sd, vd) = (self.value(*u).data(), self.value(*s).data(), self.value(*vt).data());
                let mut du = vec![0.0f32; b * h * r];
                let mut dsig = vec![0.0f32; b * r];
                let mut dvt = vec![0.0f32; b * r * w];
                for bi in 0..b {
                    let gb = &g[bi * h * w..(bi + 1) * h * w];
                    let vb = &vd[bi * r * w..(bi + 1) * r * w];
                    let ub = &ud[bi * h * r..(bi + 1) * h * r];
                    // G · Vtᵀ  -> [h, r]
                    let mut gv = vec![0.0f32; h * r];
                    kernels::gemm(h, w, r, gb, false, vb, true, 0.0, &mut gv);
                    // Uᵀ · G -> [r, w]
                    let mut ug = vec![0.0f32; r * w];
                    kernels::gemm(r, h, w, ub, true, gb, false, 0.0, &mut ug);
                    for k in 0..r {
                        let sk = sd[bi * r + k];
                        let mut acc = 0.0f64;
                        for i in 0..h {
                            du[bi * h * r + i * r + k] = gv[i * r + k] * sk;
                            acc += ub[i * r + k] as f64 * gv[i * r + k] as f64;
                        }
                        dsig[bi * r + k] = acc as f32;
                        for j in 0..w {
                            dvt[bi * r * w + k * w + j] = ug[k * w + j] * sk;
                        }
                    }
                }
                if self.rg(*u) {
                    add_into_owned(&mut grads[u.0], du);
                }
                if self.rg(*s) {
                    add_into_owned(&mut grads[s.0], dsig);
                }
                if self.rg(*vt) {
                    add_into_owned(&mut grads[vt.0], dvt);
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + vals.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(d: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let row = &d[r * c..(r + 1) * c];
        let lse = log_sum_exp(row.iter().map(|&v| v as f64));
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v as f64 - lse).exp() as f32;
        }
    }
    out
}

fn row_norms(d: &[f32], n: usize, k: usize) -> Vec<f32> {
    (0..n)
        .map(|r| d[r * k..(r + 1) * k].iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32)
        .collect()
}

fn unit_rows(d: &[f32], n: usize, k: usize) -> Vec<f32> {
    let norms = row_norms(d, n, k);
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        if norms[r] > 0.0 {
            for j in 0..k {
                out[r * k + j] = d[r * k + j] / norms[r];
            }
        }
    }
    out
}
