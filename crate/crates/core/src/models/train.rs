use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{jitter_plan, AugmentConfig, ViewPlan};
use super::backbone::{Backbone, BackboneConfig, BnMode, ParamScope};
use super::heads::{RotationHead, SslHead};
use super::objective::{contrastive_loss, rotation_plan};
use crate::autodiff::{cosine_rate, Optimizer, Tape, Tensor, UpdateRule};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;

/// Minibatch SGD schedule shared by every training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Cosine annealing of the rate over `steps`.
    pub cosine: bool,
    pub seed: u64,
    /// Light augmentation of training batches; `None` trains on raw images.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
            seed: 0,
            augment: Some(AugmentConfig {
                min_scale: 0.85,
                flip: true,
                max_rotation_deg: 10.0,
            }),
        }
    }
}

impl TrainHyper {
    fn optimizer(&self) -> Optimizer {
        Optimizer::new(UpdateRule::SgdMomentum {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        })
    }

    fn rate(&self, step: usize) -> f32 {
        if self.cosine {
            cosine_rate(self.lr, step, self.steps)
        } else {
            self.lr
        }
    }
}

/// Epoch-shuffled minibatch indices.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn check_loss(loss: f32, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss diverged at step {step}: {loss}")))
    }
}

pub struct TrainedBackbone {
    pub backbone: Backbone,
    pub loss_trace: Vec<f32>,
}

/// Cross-entropy training. The returned model is frozen and carries its
/// accuracy on `holdout` (or on the training set when no holdout is given).
pub fn train_backbone(config: BackboneConfig, train: &Dataset, holdout: Option<&Dataset>, hyper: &TrainHyper) -> Result<TrainedBackbone> {
    if train.num_classes < 2 || config.num_classes != train.num_classes {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes, data has {}",
            config.num_classes, train.num_classes
        )));
    }
    if train.is_empty() || hyper.batch_size < 2 {
        return Err(Error::InvalidArgument("training needs data and batches of at least 2".into()));
    }
    let mut backbone = Backbone::new(config, hyper.seed)?;
    let mut opt = hyper.optimizer();
    let mut batcher = Batcher::new(train.len(), hyper.batch_size, hyper.seed ^ 0x5eed);
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let idx = batcher.next();
        let batch = train.select(&idx)?;
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, ParamScope::All);
        let mut x = tape.constant(batch.images.clone());
        if let Some(aug) = &hyper.augment {
            x = tape.resample(x, jitter_plan(batch.images.shape(), aug, hyper.seed.wrapping_add(step as u64))?)?;
        }
        let out = backbone.forward(&mut tape, &bound, x, BnMode::Train)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels)?;
        let lv = tape.value(loss).item();
        check_loss(lv, step, "backbone")?;
        loss_trace.push(lv);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound.trainable().into_iter().map(|v| grads.get(v)).collect();
        opt.set_rate(hyper.rate(step));
        opt.step(&mut backbone.params_mut(ParamScope::All), &g);
        backbone.absorb_moments(&out.moments);
    }
    let eval = holdout.unwrap_or(train);
    let (_, pred) = backbone.predict(&eval.images)?;
    backbone.clean_accuracy = Some(accuracy(&pred, &eval.labels)? as f32);
    backbone.frozen = true;
    Ok(TrainedBackbone { backbone, loss_trace })
}

/// SSL settings shared by head training and test-time scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub n_views: usize,
    pub tau: f32,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            n_views: 3,
            tau: SslHead::DEFAULT_TAU,
            augment: AugmentConfig::default(),
        }
    }
}

pub struct TrainedHead<H> {
    pub head: H,
    pub loss_trace: Vec<f32>,
}

/// Trains the contrastive head on clean images while the backbone stays fixed.
pub fn train_ssl_head(backbone: &Backbone, images: &Tensor, ssl: &SslConfig, hyper: &TrainHyper) -> Result<TrainedHead<SslHead>> {
    backbone.ensure_frozen("train_ssl_head")?;
    let mut head = SslHead::new(backbone.config.feature_dim(), hyper.seed);
    head.tau = ssl.tau;
    let n = images.shape()[0];
    let mut opt = hyper.optimizer();
    let mut batcher = Batcher::new(n, hyper.batch_size, hyper.seed ^ 0x551);
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let x = images.select_outer(&batcher.next())?;
        let views = ViewPlan::sample(x.shape(), ssl.n_views, &ssl.augment, hyper.seed.wrapping_add(1 + step as u64))?;
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, ParamScope::Frozen);
        let xv = tape.constant(views.plan.apply(&x)?);
        let feats = backbone.forward(&mut tape, &bound, xv, BnMode::Eval)?.features;
        let hb = head.mlp.bind(&mut tape, true);
        let z = head.embed(&mut tape, &hb, feats)?;
        let loss = contrastive_loss(&mut tape, z, views.indicator.clone(), head.tau)?;
        let lv = tape.value(loss).item();
        check_loss(lv, step, "ssl head")?;
        loss_trace.push(lv);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = hb.trainable().into_iter().map(|v| grads.get(v)).collect();
        opt.set_rate(hyper.rate(step));
        opt.step(&mut head.mlp.params_mut(), &g);
    }
    Ok(TrainedHead { head, loss_trace })
}

/// Trains the rotation head on all four quarter-turns of clean images.
pub fn train_rotation_head(backbone: &Backbone, images: &Tensor, hyper: &TrainHyper) -> Result<TrainedHead<RotationHead>> {
    backbone.ensure_frozen("train_rotation_head")?;
    let mut head = RotationHead::new(backbone.config.feature_dim(), hyper.seed);
    let n = images.shape()[0];
    let mut opt = hyper.optimizer();
    let mut batcher = Batcher::new(n, hyper.batch_size, hyper.seed ^ 0x707);
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let x = images.select_outer(&batcher.next())?;
        let (plan, labels) = rotation_plan(x.shape(), &[0, 1, 2, 3])?;
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, ParamScope::Frozen);
        let xv = tape.constant(plan.apply(&x)?);
        let feats = backbone.forward(&mut tape, &bound, xv, BnMode::Eval)?.features;
        let hb = head.mlp.bind(&mut tape, true);
        let logits = head.mlp.forward(&mut tape, &hb, feats)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let lv = tape.value(loss).item();
        check_loss(lv, step, "rotation head")?;
        loss_trace.push(lv);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = hb.trainable().into_iter().map(|v| grads.get(v)).collect();
        opt.set_rate(hyper.rate(step));
        opt.step(&mut head.mlp.params_mut(), &g);
    }
    Ok(TrainedHead { head, loss_trace })
}
