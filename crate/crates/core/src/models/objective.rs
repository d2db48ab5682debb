use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::augment::{AugmentConfig, ViewPlan};
use super::backbone::{Backbone, BnMode, BoundBackbone, ParamScope};
use super::heads::{RotationHead, SslHead};
use crate::autodiff::{Affine, ResamplePlan, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Contrastive loss over unit embeddings: for every positive pair `(i, j)`,
/// `-log(exp(cos_ij/τ) / Σ_{k≠i} exp(cos_ik/τ))`, averaged over pairs.
/// Anchors whose indicator row is empty contribute nothing.
pub fn contrastive_loss(tape: &mut Tape, embeddings: Var, indicator: Arc<Vec<bool>>, tau: f32) -> Result<Var> {
    let m = tape.value(embeddings).shape()[0];
    if indicator.len() != m * m {
        return Err(shape_err(
            "contrastive_loss",
            format!("{m} embeddings, indicator of {} entries", indicator.len()),
        ));
    }
    let empty = (0..m).filter(|&i| !indicator[i * m..(i + 1) * m].iter().any(|&b| b)).count();
    if empty > 0 {
        log::debug!("contrastive_loss: {empty} of {m} anchors have no positive pair");
    }
    let s = tape.cosine_matrix(embeddings)?;
    tape.nt_xent(s, indicator, tau)
}

/// Mean Shannon entropy (nats) of the softmax rows of `[n, c]` logits.
pub fn entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let n = tape.value(logits).shape()[0];
    let p = tape.softmax(logits)?;
    let lp = tape.log_softmax(logits)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -1.0 / n as f32))
}

/// Entropy of the mean softmax over the rows of `[n, c]` logits.
pub fn marginal_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.softmax(logits)?;
    let pbar = tape.mean_rows(p)?;
    let lp = tape.log(pbar, 1e-30);
    let plp = tape.mul(pbar, lp)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -1.0))
}

/// Value-only mean entropy of softmax rows.
pub fn entropy_of(logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let e = entropy(&mut tape, l)?;
    Ok(tape.value(e).item() as f64)
}

/// Quarter-turn `r` (counter-clockwise in image coordinates) of a square image of side `s`.
pub fn quarter_turn(r: usize, s: usize) -> Affine {
    let m = (s - 1) as f64;
    match r % 4 {
        0 => Affine::IDENTITY,
        1 => Affine([0.0, 1.0, 0.0, -1.0, 0.0, m]),
        2 => Affine([-1.0, 0.0, m, 0.0, -1.0, m]),
        _ => Affine([0.0, -1.0, m, 1.0, 0.0, 0.0]),
    }
}

/// Plan producing the listed quarter-turns of every image, rotation-major,
/// together with the rotation label of each output row.
pub fn rotation_plan(shape: &[usize], rotations: &[usize]) -> Result<(Arc<ResamplePlan>, Vec<usize>)> {
    let &[n, c, h, w] = shape else {
        return Err(shape_err("rotation", format!("expected N×C×H×W, got {shape:?}")));
    };
    if h != w {
        return Err(shape_err("rotation", format!("quarter turns need square images, got {h}×{w}")));
    }
    let mut maps = Vec::new();
    let mut labels = Vec::new();
    for &r in rotations {
        if r > 3 {
            return Err(Error::InvalidArgument(format!("rotation index {r} outside 0..4")));
        }
        for i in 0..n {
            maps.push((i, quarter_turn(r, h)));
            labels.push(r);
        }
    }
    Ok((Arc::new(ResamplePlan::new([n, c, h, w], (h, w), &maps)?), labels))
}

/// Which label-free (or supervised, for ablation) objective drives adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslTask {
    Contrastive,
    Rotation,
    /// Cross-entropy against the true labels; an oracle upper bound.
    Supervised,
}

/// A scoring function fixed for one batch: views, rotations or labels are
/// drawn once so that every evaluation during adaptation sees the same task.
pub enum Objective<'a> {
    Contrastive {
        head: &'a SslHead,
        views: ViewPlan,
    },
    Rotation {
        head: &'a RotationHead,
        plan: Arc<ResamplePlan>,
        labels: Vec<usize>,
    },
    Supervised {
        labels: Vec<usize>,
    },
}

impl<'a> Objective<'a> {
    pub fn contrastive(head: &'a SslHead, shape: &[usize], n_views: usize, aug: &AugmentConfig, seed: u64) -> Result<Self> {
        Ok(Objective::Contrastive {
            head,
            views: ViewPlan::sample(shape, n_views, aug, seed)?,
        })
    }

    pub fn rotation(head: &'a RotationHead, shape: &[usize]) -> Result<Self> {
        let (plan, labels) = rotation_plan(shape, &[0, 1, 2, 3])?;
        Ok(Objective::Rotation { head, plan, labels })
    }

    /// Loss of the batch `x` through the backbone with heads held constant.
    pub fn loss(&self, backbone: &Backbone, tape: &mut Tape, bound: &BoundBackbone, x: Var, mode: BnMode) -> Result<Var> {
        match self {
            Objective::Contrastive { head, views } => {
                let v = tape.resample(x, views.plan.clone())?;
                let out = backbone.forward(tape, bound, v, mode)?;
                let hb = head.mlp.bind(tape, false);
                let z = head.embed(tape, &hb, out.features)?;
                contrastive_loss(tape, z, views.indicator.clone(), head.tau)
            }
            Objective::Rotation { head, plan, labels } => {
                let v = tape.resample(x, plan.clone())?;
                let out = backbone.forward(tape, bound, v, mode)?;
                let hb = head.mlp.bind(tape, false);
                let logits = head.mlp.forward(tape, &hb, out.features)?;
                tape.cross_entropy(logits, labels)
            }
            Objective::Supervised { labels } => {
                let out = backbone.forward(tape, bound, x, mode)?;
                tape.cross_entropy(out.logits, labels)
            }
        }
    }

    /// Loss value of a concrete batch with frozen weights.
    pub fn value(&self, backbone: &Backbone, x: &Tensor, mode: BnMode) -> Result<f32> {
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, ParamScope::Frozen);
        let xv = tape.constant(x.clone());
        let l = self.loss(backbone, &mut tape, &bound, xv, mode)?;
        Ok(tape.value(l).item())
    }
}

/// Rotation-prediction cross-entropy over the listed quarter-turns of `x`.
pub fn rotation_loss(backbone: &Backbone, head: &RotationHead, x: &Tensor, rotations: &[usize]) -> Result<f32> {
    let (plan, labels) = rotation_plan(x.shape(), rotations)?;
    Objective::Rotation { head, plan, labels }.value(backbone, x, BnMode::Eval)
}
