//! Synthetic image corruptions at five severities, and structured additive
//! perturbations for reversal experiments.

mod kinds;
mod structured;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kinds::apply_param;
pub use structured::{synth_structured_delta, StructuredFamily};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    ZoomBlur,
    Fog,
    Brightness,
    Contrast,
    Pixelate,
    // Reserved; synthesis is not provided for these.
    GlassBlur,
    Snow,
    Frost,
    ElasticTransform,
    JpegCompression,
}

impl CorruptionKind {
    pub const IMPLEMENTED: [CorruptionKind; 10] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::MotionBlur,
        Self::ZoomBlur,
        Self::Fog,
        Self::Brightness,
        Self::Contrast,
        Self::Pixelate,
    ];

    pub const ALL: [CorruptionKind; 15] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::MotionBlur,
        Self::ZoomBlur,
        Self::Fog,
        Self::Brightness,
        Self::Contrast,
        Self::Pixelate,
        Self::GlassBlur,
        Self::Snow,
        Self::Frost,
        Self::ElasticTransform,
        Self::JpegCompression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlur => "defocus_blur",
            Self::MotionBlur => "motion_blur",
            Self::ZoomBlur => "zoom_blur",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
            Self::GlassBlur => "glass_blur",
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::ElasticTransform => "elastic_transform",
            Self::JpegCompression => "jpeg_compression",
        }
    }

    pub fn is_implemented(self) -> bool {
        Self::IMPLEMENTED.contains(&self)
    }

    /// Stable numeric id used for seed derivation.
    pub fn tag(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let s = Self { kind, severity, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!("severity {} outside 1..=5", self.severity)));
        }
        if !self.kind.is_implemented() {
            return Err(Error::InvalidArgument(format!("corruption '{}' is not synthesized", self.kind)));
        }
        Ok(())
    }
}

/// Parameters of one corruption at one strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionParam {
    GaussianNoise {
        sigma: f64,
    },
    /// Poisson events per unit intensity.
    ShotNoise {
        rate: f64,
    },
    ImpulseNoise {
        p: f64,
    },
    DefocusBlur {
        radius: f64,
    },
    MotionBlur {
        length: usize,
        angle_deg: f64,
    },
    /// Average of zooms `1.00, 1.01, …` up to `max_zoom`.
    ZoomBlur {
        max_zoom: f64,
    },
    Fog {
        t: f64,
    },
    Brightness {
        offset: f64,
    },
    Contrast {
        gain: f64,
    },
    Pixelate {
        block: usize,
    },
}

impl CorruptionParam {
    pub fn kind(&self) -> CorruptionKind {
        match self {
            Self::GaussianNoise { .. } => CorruptionKind::GaussianNoise,
            Self::ShotNoise { .. } => CorruptionKind::ShotNoise,
            Self::ImpulseNoise { .. } => CorruptionKind::ImpulseNoise,
            Self::DefocusBlur { .. } => CorruptionKind::DefocusBlur,
            Self::MotionBlur { .. } => CorruptionKind::MotionBlur,
            Self::ZoomBlur { .. } => CorruptionKind::ZoomBlur,
            Self::Fog { .. } => CorruptionKind::Fog,
            Self::Brightness { .. } => CorruptionKind::Brightness,
            Self::Contrast { .. } => CorruptionKind::Contrast,
            Self::Pixelate { .. } => CorruptionKind::Pixelate,
        }
    }
}

/// Severity constants, loosely modeled on the public CIFAR corruption suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityTable {
    pub gaussian_sigma: [f64; 5],
    pub shot_rate: [f64; 5],
    pub impulse_p: [f64; 5],
    pub defocus_radius: [f64; 5],
    pub motion_length: [usize; 5],
    pub motion_angle_deg: [f64; 5],
    pub zoom_max: [f64; 5],
    pub fog_t: [f64; 5],
    pub brightness_offset: [f64; 5],
    pub contrast_gain: [f64; 5],
    pub pixelate_block: [usize; 5],
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            gaussian_sigma: [0.04, 0.06, 0.08, 0.09, 0.10],
            shot_rate: [500.0, 250.0, 100.0, 75.0, 50.0],
            impulse_p: [0.01, 0.02, 0.03, 0.05, 0.07],
            defocus_radius: [1.0, 1.5, 2.0, 2.5, 3.0],
            motion_length: [3, 5, 7, 9, 11],
            motion_angle_deg: [45.0; 5],
            zoom_max: [1.06, 1.11, 1.16, 1.21, 1.26],
            fog_t: [0.15, 0.25, 0.35, 0.45, 0.55],
            brightness_offset: [0.05, 0.1, 0.15, 0.2, 0.3],
            contrast_gain: [0.75, 0.5, 0.4, 0.3, 0.15],
            pixelate_block: [2, 3, 4, 5, 6],
        }
    }
}

impl SeverityTable {
    pub fn param(&self, kind: CorruptionKind, severity: u8) -> Result<CorruptionParam> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} outside 1..=5")));
        }
        let i = severity as usize - 1;
        Ok(match kind {
            CorruptionKind::GaussianNoise => CorruptionParam::GaussianNoise {
                sigma: self.gaussian_sigma[i],
            },
            CorruptionKind::ShotNoise => CorruptionParam::ShotNoise { rate: self.shot_rate[i] },
            CorruptionKind::ImpulseNoise => CorruptionParam::ImpulseNoise { p: self.impulse_p[i] },
            CorruptionKind::DefocusBlur => CorruptionParam::DefocusBlur {
                radius: self.defocus_radius[i],
            },
            CorruptionKind::MotionBlur => CorruptionParam::MotionBlur {
                length: self.motion_length[i],
                angle_deg: self.motion_angle_deg[i],
            },
            CorruptionKind::ZoomBlur => CorruptionParam::ZoomBlur {
                max_zoom: self.zoom_max[i],
            },
            CorruptionKind::Fog => CorruptionParam::Fog { t: self.fog_t[i] },
            CorruptionKind::Brightness => CorruptionParam::Brightness {
                offset: self.brightness_offset[i],
            },
            CorruptionKind::Contrast => CorruptionParam::Contrast {
                gain: self.contrast_gain[i],
            },
            CorruptionKind::Pixelate => CorruptionParam::Pixelate {
                block: self.pixelate_block[i],
            },
            other => return Err(Error::InvalidArgument(format!("corruption '{other}' is not synthesized"))),
        })
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one image, keyed by the cell coordinates and the image index.
pub(crate) fn image_rng(seed: u64, kind: CorruptionKind, severity: u8, index: usize) -> ChaCha8Rng {
    let key = mix(mix(mix(seed) ^ kind.tag()) ^ severity as u64) ^ index as u64;
    ChaCha8Rng::seed_from_u64(mix(key))
}

fn check_batch(x: &Tensor) -> Result<()> {
    if x.rank() != 4 {
        return Err(shape_err("corrupt", format!("expected N×C×H×W, got {:?}", x.shape())));
    }
    Ok(())
}

/// Corrupts `x` with the default severity table.
pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    corrupt_with(x, spec, &SeverityTable::default())
}

pub fn corrupt_with(x: &Tensor, spec: &CorruptionSpec, table: &SeverityTable) -> Result<Tensor> {
    spec.validate()?;
    check_batch(x)?;
    apply_param(x, &table.param(spec.kind, spec.severity)?, spec.seed, spec.severity)
}

/// Fixed textured probe images used for distortion estimates.
pub fn probe_batch() -> Tensor {
    let (n, side) = (16usize, 32usize);
    Tensor::from_fn(vec![n, 3, side, side], |i| {
        let img = i / (3 * side * side);
        let c = (i / (side * side)) % 3;
        let (y, x) = ((i / side) % side, i % side);
        let f = 0.15 + 0.05 * img as f32;
        let wave = (x as f32 * f + c as f32).sin() * (y as f32 * f * 0.7 + img as f32).cos();
        let edge = if (x + 2 * y + 3 * img) % 16 < 8 { 0.15 } else { -0.15 };
        (0.5 + 0.3 * wave + edge).clamp(0.0, 1.0)
    })
}

/// Mean absolute change of the probe batch at each severity.
pub fn severity_distortion(kind: CorruptionKind, table: &SeverityTable) -> Result<[f64; 5]> {
    let probe = probe_batch();
    let mut out = [0.0; 5];
    for (i, o) in out.iter_mut().enumerate() {
        let y = corrupt_with(&probe, &CorruptionSpec::new(kind, i as u8 + 1, 0)?, table)?;
        *o = mean_abs_diff(&probe, &y);
    }
    Ok(out)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as f64 - q as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}
