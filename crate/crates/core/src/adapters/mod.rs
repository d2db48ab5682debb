//! Test-time adaptation: prompt optimization against a frozen model, and
//! episodic weight-adaptation baselines.

mod prompt;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use prompt::{adapt_additive_vp, adapt_cvp, adapt_lvp, adapt_lvp_from, PromptRun, VpVariant};
pub use weights::{adapt_weights, bn_statistics_adapt, compose, memo_batch, memo_objective, memo_single, tent_episodic, WeightMethod};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{AugmentConfig, Backbone, BnMode, Objective, RotationHead, SslHead, SslTask};
use crate::prompts::{InitMode, Norm, PromptParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvpConfig {
    pub kernel_size: usize,
    pub init: InitMode,
    pub lambda_range: (f32, f32),
    pub kernel_step: f32,
    pub lambda_step: f32,
}

impl Default for CvpConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            init: InitMode::Random,
            lambda_range: (0.5, 3.0),
            kernel_step: 0.05,
            lambda_step: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VpConfig {
    pub norm: Norm,
    pub epsilon: f32,
    pub step: f32,
    pub padding_width: usize,
}

impl Default for VpConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            step: 2.0 / 255.0,
            padding_width: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LvpConfig {
    pub rank: usize,
    pub step: f32,
}

impl Default for LvpConfig {
    fn default() -> Self {
        Self { rank: 3, step: 0.01 }
    }
}

/// SGD settings for the weight-adaptation baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            lr: 1e-3,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoConfig {
    pub augmentations: usize,
    pub augment: AugmentConfig,
    pub weights: WeightConfig,
}

impl Default for MemoConfig {
    fn default() -> Self {
        Self {
            augmentations: 8,
            augment: AugmentConfig::default(),
            weights: WeightConfig::default(),
        }
    }
}

/// Everything that controls one adaptation run on one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Prompt iterations.
    pub iters: usize,
    pub batch_size: usize,
    pub ssl_task: SslTask,
    pub n_views: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Revert to the initial prompt when adaptation raised the loss.
    pub fallback: bool,
    pub cvp: CvpConfig,
    pub vp: VpConfig,
    pub lvp: LvpConfig,
    /// Full and BN-affine fine-tuning on the SSL loss.
    pub finetune: WeightConfig,
    pub tent: WeightConfig,
    pub memo: MemoConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iters: 5,
            batch_size: 16,
            ssl_task: SslTask::Contrastive,
            n_views: 3,
            augment: AugmentConfig::default(),
            seed: 0,
            fallback: true,
            cvp: CvpConfig::default(),
            vp: VpConfig::default(),
            lvp: LvpConfig::default(),
            finetune: WeightConfig {
                steps: 5,
                lr: 1e-3,
                momentum: 0.9,
            },
            tent: WeightConfig::default(),
            memo: MemoConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        crate::prompts::check_lambda_range(self.cvp.lambda_range)?;
        if self.n_views < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 views, got {}", self.n_views)));
        }
        Ok(())
    }
}

/// Result of adapting one batch.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// Prompted batch clamped to `[0, 1]`; the input itself for weight methods.
    pub adapted: Tensor,
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    pub prompt: Option<PromptParams>,
    /// `loss⁰ … loss^T` of the optimized objective.
    pub loss_trace: Vec<f32>,
    /// `min(loss^T, loss⁰)` when fallback is on, else `loss^T`.
    pub final_loss: f32,
    pub fallback: bool,
    /// Names of model tensors that differed from the snapshot before restoration.
    pub changed_tensors: Vec<String>,
    pub wall_ms: f64,
}

impl AdaptOutcome {
    pub fn initial_loss(&self) -> f32 {
        self.loss_trace[0]
    }
}

/// Frozen heads available for building test-time objectives.
#[derive(Clone, Copy, Default)]
pub struct Heads<'a> {
    pub ssl: Option<&'a SslHead>,
    pub rotation: Option<&'a RotationHead>,
}

/// Builds the per-batch objective named by `cfg.ssl_task`.
pub fn objective<'a>(cfg: &AdaptConfig, heads: Heads<'a>, x: &Tensor, labels: Option<&[usize]>) -> Result<Objective<'a>> {
    match cfg.ssl_task {
        SslTask::Contrastive => {
            let head = heads
                .ssl
                .ok_or_else(|| Error::InvalidArgument("contrastive task needs an SSL head".into()))?;
            Objective::contrastive(head, x.shape(), cfg.n_views, &cfg.augment, cfg.seed)
        }
        SslTask::Rotation => {
            let head = heads
                .rotation
                .ok_or_else(|| Error::InvalidArgument("rotation task needs a rotation head".into()))?;
            Objective::rotation(head, x.shape())
        }
        SslTask::Supervised => {
            let labels = labels.ok_or_else(|| Error::InvalidArgument("supervised task needs labels".into()))?;
            Ok(Objective::Supervised { labels: labels.to_vec() })
        }
    }
}

/// Adaptation methods selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Standard,
    Cvp,
    VpPatch,
    VpPadding,
    Lvp,
    Finetune,
    PartialFinetune,
    Bn,
    Tent,
    Memo,
    /// Weight adaptation followed by CVP against the adapted model.
    WithCvp(WeightMethod),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Self::Standard => "standard".into(),
            Self::Cvp => "cvp".into(),
            Self::VpPatch => "vp_patch".into(),
            Self::VpPadding => "vp_padding".into(),
            Self::Lvp => "lvp".into(),
            Self::Finetune => "ft".into(),
            Self::PartialFinetune => "pft".into(),
            Self::Bn => "bn".into(),
            Self::Tent => "tent".into(),
            Self::Memo => "memo".into(),
            Self::WithCvp(w) => format!("{}+cvp", w.name()),
        }
    }

    pub fn is_prompt(&self) -> bool {
        matches!(self, Self::Cvp | Self::VpPatch | Self::VpPadding | Self::Lvp | Self::WithCvp(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(w) = s.strip_suffix("+cvp") {
            return Ok(Self::WithCvp(w.parse()?));
        }
        Ok(match s {
            "standard" => Self::Standard,
            "cvp" => Self::Cvp,
            "vp_patch" => Self::VpPatch,
            "vp_padding" => Self::VpPadding,
            "lvp" => Self::Lvp,
            "ft" => Self::Finetune,
            "pft" => Self::PartialFinetune,
            "bn" => Self::Bn,
            "tent" => Self::Tent,
            "memo" => Self::Memo,
            other => return Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name()
    }
}

/// Runs `method` on one batch. `backbone` is a private workspace: weight
/// methods modify it during the run and restore it before returning.
pub fn run_method(
    method: Method,
    x: &Tensor,
    labels: Option<&[usize]>,
    backbone: &mut Backbone,
    heads: Heads<'_>,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut out = match method {
        Method::Standard => {
            let (logits, predictions) = backbone.predict(x)?;
            AdaptOutcome {
                adapted: x.clone(),
                logits,
                predictions,
                prompt: None,
                loss_trace: Vec::new(),
                final_loss: f32::NAN,
                fallback: false,
                changed_tensors: Vec::new(),
                wall_ms: 0.0,
            }
        }
        Method::Cvp => adapt_cvp(x, backbone, &objective(cfg, heads, x, labels)?, BnMode::Eval, cfg)?,
        Method::VpPatch => adapt_additive_vp(x, backbone, &objective(cfg, heads, x, labels)?, cfg, VpVariant::Patch)?,
        Method::VpPadding => adapt_additive_vp(x, backbone, &objective(cfg, heads, x, labels)?, cfg, VpVariant::Padding)?,
        Method::Lvp => adapt_lvp(x, backbone, &objective(cfg, heads, x, labels)?, cfg)?,
        Method::Finetune => adapt_weights(x, backbone, &objective(cfg, heads, x, labels)?, cfg, crate::models::ParamScope::All)?,
        Method::PartialFinetune => adapt_weights(
            x,
            backbone,
            &objective(cfg, heads, x, labels)?,
            cfg,
            crate::models::ParamScope::BnAffine,
        )?,
        Method::Bn => {
            let (logits, predictions) = bn_statistics_adapt(x, backbone)?;
            AdaptOutcome {
                adapted: x.clone(),
                logits,
                predictions,
                prompt: None,
                loss_trace: Vec::new(),
                final_loss: f32::NAN,
                fallback: false,
                changed_tensors: Vec::new(),
                wall_ms: 0.0,
            }
        }
        Method::Tent => tent_episodic(x, backbone, cfg)?,
        Method::Memo => memo_batch(x, backbone, cfg)?,
        Method::WithCvp(w) => compose(w, x, backbone, &objective(cfg, heads, x, labels)?, cfg)?,
    };
    if method != Method::Standard {
        out.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
