use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Affine, ResamplePlan, Tensor};
use crate::error::{shape_err, Error, Result};

/// Random resized crop, horizontal flip and rotation, applied as one affine
/// resampling per view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the image side, drawn from `[min_scale, 1]`.
    pub min_scale: f64,
    pub flip: bool,
    /// Rotation drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            min_scale: 0.6,
            flip: true,
            max_rotation_deg: 90.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            min_scale: 1.0,
            flip: false,
            max_rotation_deg: 0.0,
        }
    }
}

/// Parameters drawn for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    pub source: usize,
    pub scale: f64,
    pub flip: bool,
    pub angle_deg: f64,
    pub shift: (f64, f64),
}

impl ViewParams {
    /// Output pixel to source location for an `h × w` image.
    pub fn affine(&self, h: usize, w: usize) -> Affine {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let th = self.angle_deg.to_radians();
        let (c, s) = (th.cos() * self.scale, th.sin() * self.scale);
        let f = if self.flip { -1.0 } else { 1.0 };
        // source = center + shift + scale·R(θ)·F·(p − center)
        let (a, b, d, e) = (c * f, -s, s * f, c);
        let tx = cx + self.shift.0 - (a * cx + b * cy);
        let ty = cy + self.shift.1 - (d * cx + e * cy);
        Affine([a, b, tx, d, e, ty])
    }
}

/// A fixed set of views over a batch shape: the sampling plan plus the
/// positive-pair indicator. View `v` of source image `i` sits at row `v·N + i`.
#[derive(Clone, Debug)]
pub struct ViewPlan {
    pub n_views: usize,
    pub n_sources: usize,
    pub params: Vec<ViewParams>,
    pub plan: Arc<ResamplePlan>,
    pub indicator: Arc<Vec<bool>>,
}

/// Views of a concrete batch.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub views: Tensor,
    pub indicator: Arc<Vec<bool>>,
}

/// `m × m` row-major indicator, true where rows are distinct views of one source.
pub fn pair_indicator(n_views: usize, n_sources: usize) -> Vec<bool> {
    let m = n_views * n_sources;
    let mut y = vec![false; m * m];
    for a in 0..m {
        for b in 0..m {
            y[a * m + b] = a != b && a % n_sources == b % n_sources;
        }
    }
    y
}

fn check_cfg(cfg: &AugmentConfig) -> Result<()> {
    if !(cfg.min_scale > 0.0 && cfg.min_scale <= 1.0) || cfg.max_rotation_deg < 0.0 {
        return Err(Error::InvalidArgument(format!("bad augmentation settings {cfg:?}")));
    }
    Ok(())
}

fn nchw(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err("augment_views", format!("expected N×C×H×W, got {shape:?}"))),
    }
}

/// Draws `n_views` rounds of per-image view parameters.
fn draw(n: usize, h: usize, w: usize, n_views: usize, cfg: &AugmentConfig, seed: u64) -> Vec<ViewParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(n_views * n);
    for _ in 0..n_views {
        for i in 0..n {
            let scale = if cfg.min_scale < 1.0 {
                rng.random_range(cfg.min_scale..=1.0)
            } else {
                1.0
            };
            let flip = cfg.flip && rng.random_bool(0.5);
            let angle_deg = if cfg.max_rotation_deg > 0.0 {
                rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            } else {
                0.0
            };
            let slack = |side: usize| (1.0 - scale) * (side as f64 - 1.0) / 2.0;
            let (sx, sy) = (slack(w), slack(h));
            let shift = (
                if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 },
                if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 },
            );
            params.push(ViewParams {
                source: i,
                scale,
                flip,
                angle_deg,
                shift,
            });
        }
    }
    params
}

fn build_plan(shape: [usize; 4], params: &[ViewParams]) -> Result<ResamplePlan> {
    let [_, _, h, w] = shape;
    let maps: Vec<(usize, Affine)> = params.iter().map(|p| (p.source, p.affine(h, w))).collect();
    ResamplePlan::new(shape, (h, w), &maps)
}

impl ViewPlan {
    pub fn sample(shape: &[usize], n_views: usize, cfg: &AugmentConfig, seed: u64) -> Result<Self> {
        let [n, c, h, w] = nchw(shape)?;
        if n_views < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 views, got {n_views}")));
        }
        check_cfg(cfg)?;
        let params = draw(n, h, w, n_views, cfg, seed);
        let plan = build_plan([n, c, h, w], &params)?;
        Ok(Self {
            n_views,
            n_sources: n,
            params,
            plan: Arc::new(plan),
            indicator: Arc::new(pair_indicator(n_views, n)),
        })
    }
}

/// One random view per image, for augmenting supervised training batches.
pub fn jitter_plan(shape: &[usize], cfg: &AugmentConfig, seed: u64) -> Result<Arc<ResamplePlan>> {
    let [n, c, h, w] = nchw(shape)?;
    check_cfg(cfg)?;
    Ok(Arc::new(build_plan([n, c, h, w], &draw(n, h, w, 1, cfg, seed))?))
}

/// Samples `n_views` independent views of every image in `x`.
pub fn augment_views(x: &Tensor, n_views: usize, cfg: &AugmentConfig, seed: u64) -> Result<ContrastiveBatch> {
    let vp = ViewPlan::sample(x.shape(), n_views, cfg, seed)?;
    Ok(ContrastiveBatch {
        views: vp.plan.apply(x)?,
        indicator: vp.indicator,
    })
}
