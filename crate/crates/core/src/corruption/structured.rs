use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Structure of a synthetic additive corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum StructuredFamily {
    /// `conv(x, g) − x` for a random odd-sized kernel `g` shared by all channels.
    ConvKernel {
        size: usize,
    },
    /// An independent random rank-`rank` matrix per image and channel.
    LowRank {
        rank: usize,
    },
    DenseRandom,
}

impl StructuredFamily {
    pub fn name(&self) -> String {
        match self {
            Self::ConvKernel { size } => format!("conv_kernel_{size}"),
            Self::LowRank { rank } => format!("low_rank_{rank}"),
            Self::DenseRandom => "dense_random".into(),
        }
    }
}

/// Additive corruption `Δ` shaped like `x_probe`, scaled so that
/// `‖Δ‖₂ = magnitude` over the whole batch. A zero magnitude gives `Δ = 0`.
pub fn synth_structured_delta(x_probe: &Tensor, family: StructuredFamily, magnitude: f64, seed: u64) -> Result<Tensor> {
    let &[n, c, h, w] = x_probe.shape() else {
        return Err(shape_err(
            "structured_delta",
            format!("expected N×C×H×W, got {:?}", x_probe.shape()),
        ));
    };
    if !magnitude.is_finite() || magnitude < 0.0 {
        return Err(Error::InvalidArgument(format!("magnitude must be nonnegative, got {magnitude}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match family {
        StructuredFamily::ConvKernel { size } => {
            if size % 2 == 0 {
                return Err(Error::InvalidArgument(format!("kernel size must be odd, got {size}")));
            }
            let g = Tensor::from_fn(vec![size, size], |_| rng.random_range(-1.0..1.0));
            let mut tape = Tape::new();
            let xv = tape.constant(x_probe.clone());
            let gv = tape.constant(g);
            let y = tape.depthwise_conv2d(xv, gv, Padding::Replicate)?;
            tape.value(y).zip_map(x_probe, |a, b| a - b)?
        }
        StructuredFamily::LowRank { rank } => {
            if rank == 0 || rank > h.min(w) {
                return Err(Error::InvalidArgument(format!("rank {rank} outside 1..={}", h.min(w))));
            }
            let mut data = vec![0.0f32; n * c * h * w];
            for plane in data.chunks_mut(h * w) {
                let a: Vec<f64> = (0..h * rank).map(|_| StandardNormal.sample(&mut rng)).collect();
                let b: Vec<f64> = (0..rank * w).map(|_| StandardNormal.sample(&mut rng)).collect();
                for y in 0..h {
                    for x in 0..w {
                        plane[y * w + x] = (0..rank).map(|r| a[y * rank + r] * b[r * w + x]).sum::<f64>() as f32;
                    }
                }
            }
            Tensor::new(x_probe.shape().to_vec(), data)?
        }
        StructuredFamily::DenseRandom => Tensor::from_fn(x_probe.shape().to_vec(), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        }),
    };
    let norm = raw.l2_norm();
    if magnitude == 0.0 || norm == 0.0 {
        return Ok(Tensor::zeros(x_probe.shape().to_vec()));
    }
    let s = magnitude / norm;
    Ok(raw.map(|v| (v as f64 * s) as f32))
}
