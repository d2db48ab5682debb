//! Dataset sources: the CIFAR-10 binary format and procedurally drawn shapes.

use std::fs;
use std::path::{Path, PathBuf};

use cvpb_core::dataset::Dataset;
use cvpb_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;

/// Parses CIFAR-10 binary records: one label byte, then the R, G and B
/// planes of a 32×32 image.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::InvalidArgument("empty CIFAR-10 file".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let n = bytes.len() / CIFAR_RECORD;
        return Err(Error::InvalidArgument(format!(
            "truncated record {n} starting at byte offset {}: {} of {CIFAR_RECORD} bytes present",
            n * CIFAR_RECORD,
            bytes.len() - n * CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::InvalidArgument(format!(
                "label byte {} > 9 in record {i} at byte offset {}",
                rec[0],
                i * CIFAR_RECORD
            )));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels, 10)
}

/// Loads one batch file, or every `data_batch_*.bin` / `test_batch.bin` in a
/// directory matching `split`. Full batch files must hold 10000 records.
pub fn load_cifar10(path: &Path, split: CifarSplit) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| split.matches(n)))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::InvalidArgument(format!("no {split:?} batch files in {}", path.display())));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut parts = Vec::with_capacity(files.len());
    for f in &files {
        let bytes = fs::read(f).map_err(|e| io_err(f, e))?;
        let d = parse_cifar10(&bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", f.display())))?;
        if path.is_dir() && d.len() != CIFAR_BATCH_RECORDS {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {CIFAR_BATCH_RECORDS} records, found {}",
                f.display(),
                d.len()
            )));
        }
        parts.push(d);
    }
    let images = Tensor::concat_outer(&parts.iter().map(|d| d.images.clone()).collect::<Vec<_>>())?;
    let labels = parts.into_iter().flat_map(|d| d.labels).collect();
    Dataset::new(images, labels, 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    fn matches(&self, name: &str) -> bool {
        match self {
            Self::Train => name.starts_with("data_batch_") && name.ends_with(".bin"),
            Self::Test => name == "test_batch.bin",
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}

/// Shape kinds in class order.
pub const SHAPES: [&str; 10] = [
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "diamond",
    "cross",
    "bar",
    "frame",
    "half_disk",
];

/// Settings for procedurally rendered shape images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesParams {
    pub count: usize,
    pub classes: usize,
    pub side: usize,
    /// Standard deviation of the per-pixel background noise.
    pub noise: f32,
}

impl Default for ShapesParams {
    fn default() -> Self {
        Self {
            count: 6000,
            classes: 10,
            side: 32,
            noise: 0.03,
        }
    }
}

fn inside(class: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let m = u.abs().max(v.abs());
    match class {
        0 => r <= 1.0,
        1 => m <= 0.85,
        2 => (-0.8..=0.8).contains(&v) && u.abs() <= 0.5 * (v + 0.8) * 1.1,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => (0.55..=1.0).contains(&r),
        5 => u.abs() + v.abs() <= 1.0,
        6 => {
            let (a, b) = ((u + v) * std::f32::consts::FRAC_1_SQRT_2, (u - v) * std::f32::consts::FRAC_1_SQRT_2);
            (a.abs() <= 0.25 && b.abs() <= 1.0) || (b.abs() <= 0.25 && a.abs() <= 1.0)
        }
        7 => u.abs() <= 1.0 && v.abs() <= 0.35,
        8 => (0.55..=0.9).contains(&m),
        _ => r <= 1.0 && v >= 0.0,
    }
}

/// Renders a labeled set of shape images with random position, size,
/// colours and background noise. Labels cycle through the classes so the
/// balance is exact when `count` is a multiple of `classes`.
pub fn synth_shapes(params: &ShapesParams, seed: u64) -> Result<Dataset> {
    let ShapesParams {
        count,
        classes,
        side,
        noise,
    } = *params;
    if !(2..=SHAPES.len()).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 2..={}, got {classes}",
            SHAPES.len()
        )));
    }
    if side < 8 {
        return Err(Error::InvalidArgument(format!("side {side} is below 8")));
    }
    let pixel_noise = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(format!("noise {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut data = vec![0.0f32; count * 3 * plane];
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let sub = [-1.0f32 / 3.0, 0.0, 1.0 / 3.0];
    for (img, &class) in data.chunks_exact_mut(3 * plane).zip(&labels) {
        let s = side as f32;
        let radius = rng.random_range(0.22..0.38) * s;
        let cx = rng.random_range(radius..s - radius);
        let cy = rng.random_range(radius..s - radius);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let fg: [f32; 3] = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let d: f32 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
            if d >= 0.6 {
                break c;
            }
        };
        let tilt = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
        for y in 0..side {
            for x in 0..side {
                let mut cover = 0.0;
                for dy in sub {
                    for dx in sub {
                        let u = (x as f32 + 0.5 + dx - cx) / radius;
                        let v = (y as f32 + 0.5 + dy - cy) / radius;
                        cover += inside(class, u, v) as u8 as f32;
                    }
                }
                let cover = cover / 9.0;
                let shade = tilt.0 * (x as f32 / s - 0.5) + tilt.1 * (y as f32 / s - 0.5);
                for ch in 0..3 {
                    let base = bg[ch] + shade + pixel_noise.sample(&mut rng);
                    img[ch * plane + y * side + x] = (cover * fg[ch] + (1.0 - cover) * base).clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![count, 3, side, side], data)?, labels, classes)
}
