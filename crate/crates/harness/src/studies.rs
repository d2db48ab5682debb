//! Smaller measurements outside the main sweep: prompt reversal of
//! synthetic additive corruptions, and the SSL loss shift under corruption.

use cvpb_core::adapters::{adapt_cvp, adapt_lvp, objective, AdaptConfig};
use cvpb_core::corruption::{corrupt, mix, synth_structured_delta, CorruptionKind, CorruptionSpec, StructuredFamily};
use cvpb_core::metrics::reversal_residual;
use cvpb_core::models::BnMode;
use cvpb_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::runner::{batch_bounds, cell_seed, Models};

/// Residual of one prompt on one synthetic corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalRecord {
    pub family: String,
    /// `none`, `cvp`, `lvp` or `vp` (full-rank, input-initialized).
    pub prompt: String,
    /// Kernel size for CVP, factor rank otherwise; 0 for `none`.
    pub rank: usize,
    pub seed: u64,
    pub residual: f64,
    pub loss0: f64,
    pub loss_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReversalConfig {
    pub families: Vec<StructuredFamily>,
    /// Root-mean-square value of the added corruption per pixel.
    pub rms: f64,
    pub seeds: Vec<u64>,
    pub cvp_kernels: Vec<usize>,
    pub lvp_ranks: Vec<usize>,
    pub adapt: AdaptConfig,
}

impl Default for ReversalConfig {
    fn default() -> Self {
        Self {
            families: vec![
                StructuredFamily::ConvKernel { size: 3 },
                StructuredFamily::LowRank { rank: 3 },
                StructuredFamily::DenseRandom,
            ],
            rms: 0.1,
            seeds: vec![0, 1, 2],
            cvp_kernels: vec![3, 5, 7],
            lvp_ranks: vec![1, 3, 7, 15, 31],
            adapt: AdaptConfig::default(),
        }
    }
}

/// Corrupts `clean` with each structured family and measures how far each
/// adapted batch remains from the clean one.
pub fn reversal_study(models: &Models, clean: &Tensor, cfg: &ReversalConfig) -> Result<Vec<ReversalRecord>> {
    let &[_, _, h, w] = clean.shape() else {
        return Err(Error::InvalidArgument(format!("expected N×C×H×W, got {:?}", clean.shape())));
    };
    let full_rank = h.min(w);
    let magnitude = cfg.rms * (clean.len() as f64).sqrt();
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &family in &cfg.families {
            let delta = synth_structured_delta(clean, family, magnitude, mix(seed ^ 0xde17a))?;
            let x = clean.zip_map(&delta, |a, d| (a + d).clamp(0.0, 1.0))?;
            let base = AdaptConfig { seed, ..cfg.adapt.clone() };
            let obj = objective(&base, models.heads(), &x, None)?;
            let rec = |prompt: &str, rank: usize, adapted: &Tensor, l0: f32, lf: f32| -> Result<ReversalRecord> {
                Ok(ReversalRecord {
                    family: family.name(),
                    prompt: prompt.into(),
                    rank,
                    seed,
                    residual: reversal_residual(clean, adapted)?,
                    loss0: l0 as f64,
                    loss_final: lf as f64,
                })
            };
            let l0 = obj.value(&models.backbone, &x, BnMode::Eval)?;
            out.push(rec("none", 0, &x, l0, l0)?);
            for &k in &cfg.cvp_kernels {
                let mut a = base.clone();
                a.cvp.kernel_size = k;
                let o = adapt_cvp(&x, &models.backbone, &obj, BnMode::Eval, &a)?;
                out.push(rec("cvp", k, &o.adapted, o.initial_loss(), o.final_loss)?);
            }
            for &r in cfg.lvp_ranks.iter().chain([full_rank].iter()) {
                let mut a = base.clone();
                a.lvp.rank = r;
                let o = adapt_lvp(&x, &models.backbone, &obj, &a)?;
                let name = if r == full_rank { "vp" } else { "lvp" };
                out.push(rec(name, r, &o.adapted, o.initial_loss(), o.final_loss)?);
            }
        }
    }
    Ok(out)
}

/// Mean contrastive loss of clean and corrupted versions of the same images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub kind: String,
    pub severity: u8,
    pub clean_loss: f64,
    pub corrupt_loss: f64,
}

/// Contrastive loss under each corruption against the clean loss, using the
/// same views for both.
pub fn ssl_shift(
    models: &Models,
    clean: &Tensor,
    kinds: &[CorruptionKind],
    severity: u8,
    adapt: &AdaptConfig,
    seed: u64,
) -> Result<Vec<ShiftRow>> {
    let n = clean.shape()[0];
    let bounds = batch_bounds(n, adapt.batch_size);
    let mean_loss = |x: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for (b, &(s, e)) in bounds.iter().enumerate() {
            let xb = x.slice_outer(s, e)?;
            let a = AdaptConfig {
                seed: mix(seed ^ b as u64),
                ..adapt.clone()
            };
            let obj = objective(&a, models.heads(), &xb, None)?;
            total += obj.value(&models.backbone, &xb, BnMode::Eval)? as f64;
        }
        Ok(total / bounds.len() as f64)
    };
    let clean_loss = mean_loss(clean)?;
    kinds
        .iter()
        .map(|&kind| {
            let spec = CorruptionSpec::new(kind, severity, cell_seed(seed, kind, severity))?;
            Ok(ShiftRow {
                kind: kind.name().to_string(),
                severity,
                clean_loss,
                corrupt_loss: mean_loss(&corrupt(clean, &spec)?)?,
            })
        })
        .collect()
}
