use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Mean and standard deviation over projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwdStats {
    pub mean: f64,
    pub std: f64,
    pub n_proj: usize,
}

/// `n_proj` seeded unit directions in `d` dimensions.
pub fn projection_directions(d: usize, n_proj: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_proj)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn rows(t: &Tensor) -> (usize, usize) {
    let n = t.shape()[0];
    (n, t.len() / n)
}

fn project(t: &Tensor, dir: &[f64]) -> Vec<f64> {
    let (n, d) = rows(t);
    let data = t.data();
    let mut out: Vec<f64> = (0..n)
        .map(|i| data[i * d..(i + 1) * d].iter().zip(dir).map(|(&x, &u)| x as f64 * u).sum())
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// One-dimensional `p`-Wasserstein distance along each seeded direction.
/// Both sets hold the same number of samples; each sample is one outer row.
pub fn swd_per_projection(a: &Tensor, b: &Tensor, n_proj: usize, p: f64, seed: u64) -> Result<Vec<f64>> {
    let ((na, da), (nb, db)) = (rows(a), rows(b));
    if da != db {
        return Err(shape_err("swd", format!("sample dimension {da} vs {db}")));
    }
    if na != nb {
        return Err(shape_err("swd", format!("sample counts {na} vs {nb}")));
    }
    if n_proj == 0 || p < 1.0 {
        return Err(Error::InvalidArgument(format!("need n_proj ≥ 1 and p ≥ 1, got {n_proj}, {p}")));
    }
    Ok(projection_directions(da, n_proj, seed)
        .iter()
        .map(|dir| {
            let (pa, pb) = (project(a, dir), project(b, dir));
            let m = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / na as f64;
            m.powf(1.0 / p)
        })
        .collect())
}

pub fn swd(a: &Tensor, b: &Tensor, n_proj: usize, p: f64, seed: u64) -> Result<SwdStats> {
    let per = swd_per_projection(a, b, n_proj, p, seed)?;
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    let var = per.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per.len() as f64;
    Ok(SwdStats {
        mean,
        std: var.sqrt(),
        n_proj,
    })
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WIN] {
    let mut g = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over valid window positions.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; WIN]) -> Vec<f64> {
    let (ho, wo) = (h - WIN + 1, w - WIN + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..WIN).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..WIN).map(|k| g[k] * tmp[(y + k) * wo + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; WIN]) -> f64 {
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (ma, mb) = (filter(a, h, w, g), filter(b, h, w, g));
    let (saa, sbb, sab) = (
        filter(&prod(a, a), h, w, g),
        filter(&prod(b, b), h, w, g),
        filter(&prod(a, b), h, w, g),
    );
    let n = ma.len();
    (0..n)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        })
        .sum::<f64>()
        / n as f64
}

/// Structural similarity of two images (`C×H×W`) or the mean over two
/// batches (`N×C×H×W`), averaged over channels, dynamic range 1.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (planes, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        [n, c, h, w] => (n * c, h, w),
        _ => return Err(shape_err("ssim", format!("expected C×H×W or N×C×H×W, got {:?}", x.shape()))),
    };
    if h < WIN || w < WIN {
        return Err(shape_err("ssim", format!("spatial extent {h}×{w} below window {WIN}")));
    }
    let g = gaussian_window();
    let hw = h * w;
    let as64 = |t: &Tensor, p: usize| t.data()[p * hw..(p + 1) * hw].iter().map(|&v| v as f64).collect::<Vec<_>>();
    let total: f64 = (0..planes).map(|p| ssim_plane(&as64(x, p), &as64(y, p), h, w, &g)).sum();
    Ok(total / planes as f64)
}

/// `‖x_adapted − x_clean‖₂ / N` over the whole batch.
pub fn reversal_residual(x_clean: &Tensor, x_adapted: &Tensor) -> Result<f64> {
    if x_clean.shape() != x_adapted.shape() {
        return Err(shape_err(
            "reversal_residual",
            format!("{:?} vs {:?}", x_clean.shape(), x_adapted.shape()),
        ));
    }
    let ss: f64 = x_clean
        .data()
        .iter()
        .zip(x_adapted.data())
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
            d * d
        })
        .sum();
    Ok(ss.sqrt() / x_clean.shape()[0] as f64)
}
