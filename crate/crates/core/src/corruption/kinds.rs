use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{check_batch, image_rng, CorruptionParam};
use crate::autodiff::{Affine, Padding, ResamplePlan, Tape, Tensor};
use crate::error::{Error, Result};

/// Applies explicit corruption parameters; the result is clipped to `[0, 1]`.
/// `seed` and `severity` key the per-image random streams.
pub fn apply_param(x: &Tensor, param: &CorruptionParam, seed: u64, severity: u8) -> Result<Tensor> {
    check_batch(x)?;
    let kind = param.kind();
    let per_image = x.len() / x.shape()[0];
    let noisy = |f: &mut dyn FnMut(f32, &mut rand_chacha::ChaCha8Rng) -> f32| -> Tensor {
        let mut data = x.to_vec();
        for (i, img) in data.chunks_mut(per_image).enumerate() {
            let mut rng = image_rng(seed, kind, severity, i);
            for v in img.iter_mut() {
                *v = f(*v, &mut rng);
            }
        }
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    let out = match *param {
        CorruptionParam::GaussianNoise { sigma } => {
            if sigma < 0.0 {
                return Err(Error::InvalidArgument(format!("negative sigma {sigma}")));
            }
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            noisy(&mut |v, rng| v + (sigma * normal.sample(rng)) as f32)
        }
        CorruptionParam::ShotNoise { rate } => {
            if rate <= 0.0 {
                return Err(Error::InvalidArgument(format!("shot rate must be positive, got {rate}")));
            }
            noisy(&mut |v, rng| {
                let lam = rate * v.max(0.0) as f64;
                if lam > 0.0 {
                    (Poisson::new(lam).expect("positive rate").sample(rng) / rate) as f32
                } else {
                    0.0
                }
            })
        }
        CorruptionParam::ImpulseNoise { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("impulse probability {p} outside [0, 1]")));
            }
            noisy(&mut |v, rng| {
                if rng.random::<f64>() < p {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
        }
        CorruptionParam::DefocusBlur { radius } => filter(x, &disk_kernel(radius)?)?,
        CorruptionParam::MotionBlur { length, angle_deg } => filter(x, &line_kernel(length, angle_deg)?)?,
        CorruptionParam::ZoomBlur { max_zoom } => zoom_blur(x, max_zoom)?,
        CorruptionParam::Fog { t } => {
            let t = t as f32;
            x.map(|v| (1.0 - t) * v + t)
        }
        CorruptionParam::Brightness { offset } => x.map(|v| v + offset as f32),
        CorruptionParam::Contrast { gain } => {
            let mut data = x.to_vec();
            for img in data.chunks_mut(per_image) {
                let m = (img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64) as f32;
                for v in img.iter_mut() {
                    *v = (*v - m) * gain as f32 + m;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        CorruptionParam::Pixelate { block } => pixelate(x, block)?,
    };
    Ok(out.clamp(0.0, 1.0))
}

/// Same-size filtering of every channel with replicate padding.
fn filter(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(kernel.clone());
    let y = tape.depthwise_conv2d(xv, kv, Padding::Replicate)?;
    Ok(tape.value(y).clone())
}

/// Normalized disk of the given radius on the smallest odd grid that holds it.
pub(crate) fn disk_kernel(radius: f64) -> Result<Tensor> {
    if radius.is_nan() || radius < 0.0 {
        return Err(Error::InvalidArgument(format!("bad disk radius {radius}")));
    }
    let half = radius.floor() as usize;
    let k = 2 * half + 1;
    let r2 = radius * radius;
    let w: Vec<f32> = (0..k * k)
        .map(|i| {
            let (dy, dx) = ((i / k) as f64 - half as f64, (i % k) as f64 - half as f64);
            if dx * dx + dy * dy <= r2 + 1e-9 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let s: f32 = w.iter().sum();
    Tensor::new(vec![k, k], w.into_iter().map(|v| v / s).collect::<Vec<_>>())
}

/// Normalized straight line of `length` pixels through the center at `angle_deg`.
pub(crate) fn line_kernel(length: usize, angle_deg: f64) -> Result<Tensor> {
    if length == 0 || length.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("motion length must be odd, got {length}")));
    }
    let c = (length / 2) as f64;
    let (s, co) = angle_deg.to_radians().sin_cos();
    let mut w = vec![0.0f32; length * length];
    let samples = 8 * length;
    for i in 0..samples {
        let t = -c + 2.0 * c * i as f64 / (samples - 1).max(1) as f64;
        let (x, y) = ((c + t * co).round() as usize, (c - t * s).round() as usize);
        w[y.min(length - 1) * length + x.min(length - 1)] += 1.0;
    }
    let total: f32 = w.iter().sum();
    Tensor::new(vec![length, length], w.into_iter().map(|v| v / total).collect::<Vec<_>>())
}

fn zoom_blur(x: &Tensor, max_zoom: f64) -> Result<Tensor> {
    if max_zoom < 1.0 {
        return Err(Error::InvalidArgument(format!("max zoom {max_zoom} below 1")));
    }
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let steps = ((max_zoom - 1.0) / 0.01 + 1e-9).floor() as usize;
    let mut acc: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    for s in 1..=steps {
        let z = 1.0 + 0.01 * s as f64;
        let aff = Affine([1.0 / z, 0.0, cx - cx / z, 0.0, 1.0 / z, cy - cy / z]);
        let maps: Vec<_> = (0..n).map(|i| (i, aff)).collect();
        let zoomed = ResamplePlan::new([n, c, h, w], (h, w), &maps)?.apply(x)?;
        for (a, &v) in acc.iter_mut().zip(zoomed.data()) {
            *a += v as f64;
        }
    }
    let k = (steps + 1) as f64;
    Tensor::new(x.shape().to_vec(), acc.into_iter().map(|v| (v / k) as f32).collect::<Vec<_>>())
}

fn pixelate(x: &Tensor, block: usize) -> Result<Tensor> {
    if block == 0 {
        return Err(Error::InvalidArgument("pixelate block must be positive".into()));
    }
    let &[_, _, h, w] = x.shape() else { unreachable!() };
    let mut data = x.to_vec();
    for plane in data.chunks_mut(h * w) {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut s = 0.0f64;
                for y in by..ey {
                    for xx in bx..ex {
                        s += plane[y * w + xx] as f64;
                    }
                }
                let m = (s / ((ey - by) * (ex - bx)) as f64) as f32;
                for y in by..ey {
                    for xx in bx..ex {
                        plane[y * w + xx] = m;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}
