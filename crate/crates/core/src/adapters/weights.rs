use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::prompt::adapt_cvp;
use super::{AdaptConfig, AdaptOutcome, WeightConfig};
use crate::autodiff::{Optimizer, Tape, Tensor, UpdateRule};
use crate::error::{shape_err, Error, Result};
use crate::models::{entropy, entropy_of, marginal_entropy, Backbone, BnMode, Objective, ParamScope, ViewPlan};

/// Weight snapshot held for the duration of one episodic run.
struct Episode {
    snapshot: Backbone,
    fingerprint: u64,
}

fn fingerprint(b: &Backbone) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in b.named_tensors() {
        h.write(name.as_bytes());
        for &v in t.shape() {
            h.write_usize(v);
        }
        for &v in t.data() {
            h.write_u32(v.to_bits());
        }
    }
    h.finish()
}

impl Episode {
    fn begin(b: &Backbone) -> Self {
        Self {
            snapshot: b.clone(),
            fingerprint: fingerprint(b),
        }
    }

    /// Restores the snapshot and returns the names of tensors that had changed.
    fn end(self, b: &mut Backbone) -> Result<Vec<String>> {
        let changed = b
            .named_tensors()
            .into_iter()
            .zip(self.snapshot.named_tensors())
            .filter(|((_, now), (_, then))| !now.bit_eq(then))
            .map(|((name, _), _)| name)
            .collect();
        *b = self.snapshot;
        if fingerprint(b) != self.fingerprint {
            return Err(Error::Integrity("restored weights differ from the pre-adaptation snapshot".into()));
        }
        Ok(changed)
    }
}

fn sgd(w: &WeightConfig) -> Optimizer {
    Optimizer::new(UpdateRule::SgdMomentum {
        lr: w.lr,
        momentum: w.momentum,
        weight_decay: 0.0,
    })
}

fn batch_len(x: &Tensor, op: &'static str) -> Result<usize> {
    match *x.shape() {
        [n, _, _, _] => Ok(n),
        ref s => Err(shape_err(op, format!("expected N×C×H×W, got {s:?}"))),
    }
}

fn require_pair(x: &Tensor, op: &'static str) -> Result<()> {
    let n = batch_len(x, op)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{op} needs a batch of at least 2, got {n}")));
    }
    Ok(())
}

fn weight_outcome(
    x: &Tensor,
    logits: Tensor,
    predictions: Vec<usize>,
    trace: Vec<f32>,
    changed: Vec<String>,
    start: Instant,
) -> AdaptOutcome {
    AdaptOutcome {
        adapted: x.clone(),
        logits,
        predictions,
        prompt: None,
        final_loss: trace.last().copied().unwrap_or(f32::NAN),
        loss_trace: trace,
        fallback: false,
        changed_tensors: changed,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Episodic fine-tuning on the self-supervised objective over `scope`.
pub fn adapt_weights(
    x: &Tensor,
    backbone: &mut Backbone,
    objective: &Objective<'_>,
    cfg: &AdaptConfig,
    scope: ParamScope,
) -> Result<AdaptOutcome> {
    batch_len(x, "adapt_weights")?;
    let start = Instant::now();
    let episode = Episode::begin(backbone);
    let mut opt = sgd(&cfg.finetune);
    let mut trace = Vec::with_capacity(cfg.finetune.steps + 1);
    for _ in 0..cfg.finetune.steps {
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, scope);
        let xv = tape.constant(x.clone());
        let loss = objective.loss(backbone, &mut tape, &bound, xv, BnMode::Eval)?;
        trace.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.trainable().iter().map(|&v| grads.get(v)).collect();
        opt.step(&mut backbone.params_mut(scope), &g);
    }
    trace.push(objective.value(backbone, x, BnMode::Eval)?);
    let prediction = backbone.predict(x);
    let changed = episode.end(backbone)?;
    let (logits, predictions) = prediction?;
    Ok(weight_outcome(x, logits, predictions, trace, changed, start))
}

/// Predictions with batch statistics in place of running statistics.
pub fn bn_statistics_adapt(x: &Tensor, backbone: &Backbone) -> Result<(Tensor, Vec<usize>)> {
    require_pair(x, "bn_statistics_adapt")?;
    backbone.predict_with(x, BnMode::Batch)
}

/// Entropy descent over BN affine parameters with batch statistics. Returns
/// the entropy before each step.
fn tent_steps(x: &Tensor, backbone: &mut Backbone, w: &WeightConfig) -> Result<Vec<f32>> {
    let mut opt = sgd(w);
    let mut trace = Vec::with_capacity(w.steps + 1);
    for _ in 0..w.steps {
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, ParamScope::BnAffine);
        let xv = tape.constant(x.clone());
        let out = backbone.forward(&mut tape, &bound, xv, BnMode::Batch)?;
        let loss = entropy(&mut tape, out.logits)?;
        trace.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.trainable().iter().map(|&v| grads.get(v)).collect();
        opt.step(&mut backbone.params_mut(ParamScope::BnAffine), &g);
    }
    Ok(trace)
}

/// Episodic entropy minimization. The trace is the prediction entropy before
/// each step and after the last.
pub fn tent_episodic(x: &Tensor, backbone: &mut Backbone, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    require_pair(x, "tent_episodic")?;
    let start = Instant::now();
    let episode = Episode::begin(backbone);
    let run = tent_steps(x, backbone, &cfg.tent).and_then(|trace| Ok((trace, backbone.predict_with(x, BnMode::Batch)?)));
    let changed = episode.end(backbone)?;
    let (mut trace, (logits, predictions)) = run?;
    trace.push(entropy_of(&logits)? as f32);
    Ok(weight_outcome(x, logits, predictions, trace, changed, start))
}

fn memo_views(x: &Tensor, cfg: &AdaptConfig, seed: u64) -> Result<ViewPlan> {
    let m = &cfg.memo;
    if m.augmentations < 2 {
        return Err(Error::InvalidArgument(format!(
            "memo needs at least 2 augmentations, got {}",
            m.augmentations
        )));
    }
    ViewPlan::sample(x.shape(), m.augmentations, &m.augment, seed)
}

/// Marginal entropy of the augmented copies of a single image.
pub fn memo_objective(x: &Tensor, backbone: &Backbone, views: &ViewPlan) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, ParamScope::Frozen);
    let xv = tape.constant(x.clone());
    let v = tape.resample(xv, views.plan.clone())?;
    let out = backbone.forward(&mut tape, &bound, v, BnMode::Eval)?;
    let h = marginal_entropy(&mut tape, out.logits)?;
    Ok(tape.value(h).item())
}

fn memo_steps(x: &Tensor, backbone: &mut Backbone, views: &ViewPlan, w: &WeightConfig) -> Result<Vec<f32>> {
    let mut opt = sgd(w);
    let mut trace = Vec::with_capacity(w.steps + 1);
    for _ in 0..w.steps {
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, ParamScope::All);
        let xv = tape.constant(x.clone());
        let v = tape.resample(xv, views.plan.clone())?;
        let out = backbone.forward(&mut tape, &bound, v, BnMode::Eval)?;
        let loss = marginal_entropy(&mut tape, out.logits)?;
        trace.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.trainable().iter().map(|&v| grads.get(v)).collect();
        opt.step(&mut backbone.params_mut(ParamScope::All), &g);
    }
    trace.push(memo_objective(x, backbone, views)?);
    Ok(trace)
}

/// Single-image adaptation on the marginal entropy of augmented copies.
pub fn memo_single(x: &Tensor, backbone: &mut Backbone, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    if batch_len(x, "memo_single")? != 1 {
        return Err(shape_err("memo_single", format!("expected one image, got {:?}", x.shape())));
    }
    let start = Instant::now();
    let views = memo_views(x, cfg, cfg.seed)?;
    let episode = Episode::begin(backbone);
    let run = memo_steps(x, backbone, &views, &cfg.memo.weights).and_then(|trace| Ok((trace, backbone.predict(x)?)));
    let changed = episode.end(backbone)?;
    let (trace, (logits, predictions)) = run?;
    Ok(weight_outcome(x, logits, predictions, trace, changed, start))
}

fn image_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-image results stitched into one batch outcome; traces are averaged.
fn stitch(parts: Vec<AdaptOutcome>, start: Instant) -> Result<AdaptOutcome> {
    let n = parts.len() as f32;
    let len = parts.iter().map(|p| p.loss_trace.len()).min().unwrap_or(0);
    let loss_trace = (0..len).map(|t| parts.iter().map(|p| p.loss_trace[t]).sum::<f32>() / n).collect();
    let final_loss = parts.iter().map(|p| p.final_loss).sum::<f32>() / n;
    let mut changed: Vec<String> = parts.iter().flat_map(|p| p.changed_tensors.iter().cloned()).collect();
    changed.sort();
    changed.dedup();
    Ok(AdaptOutcome {
        adapted: Tensor::concat_outer(&parts.iter().map(|p| p.adapted.clone()).collect::<Vec<_>>())?,
        logits: Tensor::concat_outer(&parts.iter().map(|p| p.logits.clone()).collect::<Vec<_>>())?,
        predictions: parts.iter().flat_map(|p| p.predictions.iter().copied()).collect(),
        prompt: None,
        loss_trace,
        final_loss,
        fallback: parts.iter().any(|p| p.fallback),
        changed_tensors: changed,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// [`memo_single`] on every image of a batch, each with its own episode.
pub fn memo_batch(x: &Tensor, backbone: &mut Backbone, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    let n = batch_len(x, "memo_batch")?;
    let start = Instant::now();
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = cfg.clone();
        c.seed = image_seed(cfg.seed, i);
        parts.push(memo_single(&x.slice_outer(i, i + 1)?, backbone, &c)?);
    }
    stitch(parts, start)
}

/// Weight adaptation that can precede CVP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    Identity,
    Bn,
    Tent,
    Memo,
}

impl WeightMethod {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Bn => "bn",
            Self::Tent => "tent",
            Self::Memo => "memo",
        }
    }
}

impl FromStr for WeightMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "none" => Self::Identity,
            "bn" => Self::Bn,
            "tent" => Self::Tent,
            "memo" => Self::Memo,
            other => return Err(Error::InvalidArgument(format!("unknown weight method '{other}'"))),
        })
    }
}

/// Weight adaptation first, then CVP against the adapted model, then
/// restoration. With MEMO every image gets its own adapted model and CVP
/// run over the batch; only that image's row is kept.
pub fn compose(
    weights: WeightMethod,
    x: &Tensor,
    backbone: &mut Backbone,
    objective: &Objective<'_>,
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let start = Instant::now();
    let mut out = match weights {
        WeightMethod::Identity => adapt_cvp(x, backbone, objective, BnMode::Eval, cfg)?,
        WeightMethod::Bn => {
            require_pair(x, "compose")?;
            adapt_cvp(x, backbone, objective, BnMode::Batch, cfg)?
        }
        WeightMethod::Tent => {
            require_pair(x, "compose")?;
            backbone.ensure_frozen("compose")?;
            let episode = Episode::begin(backbone);
            let run = tent_steps(x, backbone, &cfg.tent).and_then(|_| adapt_cvp(x, backbone, objective, BnMode::Batch, cfg));
            let changed = episode.end(backbone)?;
            let mut out = run?;
            out.changed_tensors = changed;
            out
        }
        WeightMethod::Memo => {
            backbone.ensure_frozen("compose")?;
            let n = batch_len(x, "compose")?;
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let xi = x.slice_outer(i, i + 1)?;
                let views = memo_views(&xi, cfg, image_seed(cfg.seed, i))?;
                let episode = Episode::begin(backbone);
                let run =
                    memo_steps(&xi, backbone, &views, &cfg.memo.weights).and_then(|_| adapt_cvp(x, backbone, objective, BnMode::Eval, cfg));
                let changed = episode.end(backbone)?;
                let full = run?;
                parts.push(AdaptOutcome {
                    adapted: full.adapted.slice_outer(i, i + 1)?,
                    logits: full.logits.slice_outer(i, i + 1)?,
                    predictions: vec![full.predictions[i]],
                    changed_tensors: changed,
                    ..full
                });
            }
            stitch(parts, start)?
        }
    };
    out.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}
