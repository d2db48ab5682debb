//! Input-space prompts: convolutional, additive (patch or frame) and low-rank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{svd_small, FactorTriple, Padding, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Sharpening kernel.
    Fixed,
    /// i.i.d. uniform on `(−1/k², 1/k²)`.
    Random,
}

/// Convolutional prompt `x + λ·conv(x, k)` with one `k×k` kernel for all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CvpParams {
    pub kernel: Tensor,
    pub lambda: f32,
    pub lambda_range: (f32, f32),
}

/// Center `5`, four-neighborhood `−1`, zero elsewhere.
pub fn sharpness_kernel(k: usize) -> Result<Tensor> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("sharpness kernel needs odd k ≥ 3, got {k}")));
    }
    let c = k / 2;
    Ok(Tensor::from_fn(vec![k, k], |i| {
        let (y, x) = (i / k, i % k);
        match (y.abs_diff(c), x.abs_diff(c)) {
            (0, 0) => 5.0,
            (0, 1) | (1, 0) => -1.0,
            _ => 0.0,
        }
    }))
}

pub fn check_lambda_range(range: (f32, f32)) -> Result<()> {
    if !(range.0.is_finite() && range.1.is_finite() && range.0 <= range.1) {
        return Err(Error::InvalidArgument(format!("λ range {range:?} must be finite with lo ≤ hi")));
    }
    Ok(())
}

pub fn init_cvp(mode: InitMode, k: usize, lambda_range: (f32, f32), seed: u64) -> Result<CvpParams> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
    }
    check_lambda_range(lambda_range)?;
    let kernel = match mode {
        InitMode::Fixed => sharpness_kernel(k)?,
        InitMode::Random => {
            let b = 1.0 / (k * k) as f32;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(vec![k, k], |_| rng.random_range(-b..b))
        }
    };
    Ok(CvpParams {
        kernel,
        lambda: 0.5 * (lambda_range.0 + lambda_range.1),
        lambda_range,
    })
}

impl CvpParams {
    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn trainable_count(&self) -> usize {
        self.kernel.len() + 1
    }

    /// Clamps λ into its range.
    pub fn project(&mut self) {
        self.lambda = self.lambda.clamp(self.lambda_range.0, self.lambda_range.1);
    }
}

/// `x + λ·conv(x, k)` on the tape; `lambda` holds one value.
pub fn cvp_forward(tape: &mut Tape, x: Var, kernel: Var, lambda: Var) -> Result<Var> {
    let c = tape.depthwise_conv2d(x, kernel, Padding::Replicate)?;
    let s = tape.scalar_mul(lambda, c)?;
    tape.add(x, s)
}

/// Prompted batch, unclipped.
pub fn apply_cvp(x: &Tensor, p: &CvpParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(p.kernel.clone());
    let l = tape.constant(Tensor::scalar(p.lambda));
    let y = cvp_forward(&mut tape, xv, k, l)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

/// Additive prompt `x + mask ⊙ v`, shared across the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveVpParams {
    /// `C×H×W`
    pub v: Tensor,
    pub mask: Tensor,
    pub norm: Norm,
    pub epsilon: f32,
    pub step: f32,
}

/// 0-1 mask that is 1 within `width` pixels of the border.
pub fn frame_mask(c: usize, h: usize, w: usize, width: usize) -> Tensor {
    Tensor::from_fn(vec![c, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        let inside = y >= width && y + width < h && x >= width && x + width < w;
        if inside {
            0.0
        } else {
            1.0
        }
    })
}

impl AdditiveVpParams {
    pub fn patch(shape: [usize; 3], norm: Norm, epsilon: f32, step: f32) -> Self {
        Self {
            v: Tensor::zeros(shape.to_vec()),
            mask: Tensor::ones(shape.to_vec()),
            norm,
            epsilon,
            step,
        }
    }

    pub fn padding(shape: [usize; 3], width: usize, norm: Norm, epsilon: f32, step: f32) -> Self {
        let [c, h, w] = shape;
        Self {
            v: Tensor::zeros(shape.to_vec()),
            mask: frame_mask(c, h, w, width),
            norm,
            epsilon,
            step,
        }
    }

    /// Number of masked entries, the trainable values.
    pub fn trainable_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }

    /// Zeroes off-mask entries, then projects onto the ε-ball of the norm.
    pub fn project(&mut self) {
        let masked = self
            .v
            .zip_map(&self.mask, |v, m| if m != 0.0 { v } else { 0.0 })
            .expect("mask shape");
        let eps = self.epsilon.max(0.0);
        self.v = match self.norm {
            Norm::Linf => masked.clamp(-eps, eps),
            Norm::L2 => {
                let n = masked.l2_norm();
                if n > eps as f64 {
                    let s = (eps as f64 / n) as f32;
                    masked.map(|v| v * s)
                } else {
                    masked
                }
            }
        };
    }

    /// Size of the masked prompt under the declared norm.
    pub fn magnitude(&self) -> f64 {
        let m = self.v.zip_map(&self.mask, |v, m| v * m).expect("mask shape");
        match self.norm {
            Norm::Linf => m.data().iter().fold(0.0f64, |a, &v| a.max(v.abs() as f64)),
            Norm::L2 => m.l2_norm(),
        }
    }
}

pub fn additive_forward(tape: &mut Tape, x: Var, v: Var, mask: Var) -> Result<Var> {
    let mv = tape.mul(v, mask)?;
    tape.add_bcast(x, mv)
}

pub fn apply_additive_vp(x: &Tensor, p: &AdditiveVpParams) -> Result<Tensor> {
    if p.mask.shape() != p.v.shape() || x.rank() != 4 || x.shape()[1..] != *p.v.shape() {
        return Err(shape_err(
            "additive_vp",
            format!("batch {:?}, prompt {:?}, mask {:?}", x.shape(), p.v.shape(), p.mask.shape()),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let v = tape.constant(p.v.clone());
    let m = tape.constant(p.mask.clone());
    let y = additive_forward(&mut tape, xv, v, m)?;
    Ok(tape.value(y).clone())
}

/// Low-rank additive prompt: one factor triple per image and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LvpParams {
    /// `[n, c, h, w]` of the prompted batch.
    pub shape: [usize; 4],
    /// Row-major over `(image, channel)`.
    pub factors: Vec<FactorTriple>,
    pub rank: usize,
}

/// Factors of every channel of every image of `x`, kept untruncated.
pub fn lvp_init(x: &Tensor, rank: usize) -> Result<LvpParams> {
    let &[n, c, h, w] = x.shape() else {
        return Err(shape_err("lvp_init", format!("expected N×C×H×W, got {:?}", x.shape())));
    };
    if rank > h.min(w) {
        return Err(Error::InvalidArgument(format!("rank {rank} exceeds min({h}, {w})")));
    }
    let factors = x
        .data()
        .chunks(h * w)
        .map(|plane| svd_small(plane, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(LvpParams {
        shape: [n, c, h, w],
        factors,
        rank,
    })
}

/// Truncated factors as batched tensors.
pub struct LowRankTensors {
    pub u: Tensor,
    pub s: Tensor,
    pub vt: Tensor,
}

impl LvpParams {
    /// Prompt values per image: `C·(H·r + r + W·r)`.
    pub fn trainable_count_per_image(&self) -> usize {
        let [_, c, h, w] = self.shape;
        c * (h * self.rank + self.rank + w * self.rank)
    }

    /// `(U[:, :r], S[:r], Vt[:r, :])` stacked over planes; `None` when `r = 0`.
    pub fn truncated(&self) -> Option<LowRankTensors> {
        if self.rank == 0 {
            return None;
        }
        let [n, c, h, w] = self.shape;
        let (b, r) = (n * c, self.rank);
        let (mut u, mut s, mut vt) = (
            Vec::with_capacity(b * h * r),
            Vec::with_capacity(b * r),
            Vec::with_capacity(b * r * w),
        );
        for f in &self.factors {
            let (fu, fs, fv) = f.truncated(r);
            u.extend(fu);
            s.extend(fs);
            vt.extend(fv);
        }
        Some(LowRankTensors {
            u: Tensor::new(vec![b, h, r], u).expect("u shape"),
            s: Tensor::new(vec![b, r], s).expect("s shape"),
            vt: Tensor::new(vec![b, r, w], vt).expect("vt shape"),
        })
    }

    /// The rank-`r` prompt `M′` as an `N×C×H×W` tensor.
    pub fn reconstruction(&self) -> Tensor {
        let data: Vec<f32> = self.factors.iter().flat_map(|f| f.reconstruct(self.rank)).collect();
        Tensor::new(self.shape.to_vec(), data).expect("reconstruction shape")
    }

    /// Replaces the factors by the SVD of the given truncated factors'
    /// product, so the prompt is again an exact rank-`r` factorization.
    pub fn reproject(&mut self, t: &LowRankTensors) -> Result<()> {
        let [_, _, h, w] = self.shape;
        let mut tape = Tape::new();
        let (u, s, vt) = (tape.constant(t.u.clone()), tape.constant(t.s.clone()), tape.constant(t.vt.clone()));
        let m = tape.low_rank(u, s, vt)?;
        let m = tape.value(m).clone();
        self.factors = m
            .data()
            .chunks(h * w)
            .map(|plane| svd_small(plane, h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Truncates the stored factors themselves to rank `r`.
    pub fn project(&mut self) -> Result<()> {
        if let Some(t) = self.truncated() {
            self.reproject(&t)
        } else {
            Ok(())
        }
    }

    pub fn zero_singular_values(&mut self) {
        for f in &mut self.factors {
            f.s.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `x + U·diag(S)·Vt` with the factor batch laid out over `(image, channel)`.
pub fn lvp_forward(tape: &mut Tape, x: Var, u: Var, s: Var, vt: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let m = tape.low_rank(u, s, vt)?;
    let m = tape.reshape(m, &shape)?;
    tape.add(x, m)
}

pub fn lvp_apply(x: &Tensor, p: &LvpParams) -> Result<Tensor> {
    if x.shape() != p.shape {
        return Err(shape_err("lvp_apply", format!("params for {:?}, batch {:?}", p.shape, x.shape())));
    }
    match p.truncated() {
        None => Ok(x.clone()),
        Some(t) => {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (u, s, vt) = (tape.constant(t.u), tape.constant(t.s), tape.constant(t.vt));
            let y = lvp_forward(&mut tape, xv, u, s, vt)?;
            Ok(tape.value(y).clone())
        }
    }
}

/// Any of the three prompt families.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptParams {
    Cvp(CvpParams),
    Additive(AdditiveVpParams),
    Lvp(LvpParams),
}

impl PromptParams {
    /// Trainable values for one batch (LVP counts every image).
    pub fn trainable_count(&self) -> usize {
        match self {
            Self::Cvp(p) => p.trainable_count(),
            Self::Additive(p) => p.trainable_count(),
            Self::Lvp(p) => p.trainable_count_per_image() * p.shape[0],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Cvp(p) => apply_cvp(x, p),
            Self::Additive(p) => apply_additive_vp(x, p),
            Self::Lvp(p) => lvp_apply(x, p),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Cvp(p) => format!("cvp k={} λ={:.4} kernel={:?}", p.kernel_size(), p.lambda, p.kernel.data()),
            Self::Additive(p) => format!("additive {:?} ε={} |v|={:.5}", p.norm, p.epsilon, p.magnitude()),
            Self::Lvp(p) => format!("lvp r={} planes={}", p.rank, p.factors.len()),
        }
    }
}
