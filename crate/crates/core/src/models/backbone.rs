use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, BnStats, Padding, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Layer layout of the classifier: `[conv3×3 → BN → ReLU]` blocks with a 2×2
/// max-pool after the listed blocks, global average pooling, then a linear
/// classifier. The penultimate feature is the pooled output of the last block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Zero-based block indices followed by a 2×2 max-pool.
    pub pool_after: Vec<usize>,
    pub num_classes: usize,
    /// Weight of the batch statistic in the running-statistic update.
    pub bn_momentum: f32,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 64, 128, 128],
            pool_after: vec![1, 3],
            num_classes: 10,
            bn_momentum: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Running statistics (inference).
    Eval,
    /// Statistics of the current batch, running statistics untouched.
    Batch,
    /// Batch statistics; the caller folds the returned moments into the
    /// running statistics with [`Backbone::absorb_moments`].
    Train,
}

/// Which backbone tensors are recorded as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    Frozen,
    All,
    BnAffine,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<ConvBlock>,
    /// `[feature_dim, num_classes]`
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    /// Clean-split accuracy recorded at the end of training.
    pub clean_accuracy: Option<f32>,
    /// Set once training is done; test-time prompt methods require it.
    pub frozen: bool,
}

/// Tape handles for one bound copy of the backbone weights.
pub struct BoundBackbone {
    convs: Vec<Var>,
    gammas: Vec<Var>,
    betas: Vec<Var>,
    fc_w: Var,
    fc_b: Var,
    scope: ParamScope,
}

impl BoundBackbone {
    /// Trainable handles in the order of [`Backbone::params_mut`].
    pub fn trainable(&self) -> Vec<Var> {
        match self.scope {
            ParamScope::Frozen => Vec::new(),
            ParamScope::BnAffine => self.gammas.iter().chain(&self.betas).copied().collect(),
            ParamScope::All => {
                let mut v: Vec<Var> = Vec::new();
                for i in 0..self.convs.len() {
                    v.extend([self.convs[i], self.gammas[i], self.betas[i]]);
                }
                v.extend([self.fc_w, self.fc_b]);
                v
            }
        }
    }
}

pub struct BackboneOutput {
    pub features: Var,
    pub logits: Var,
    pub moments: Vec<BatchMoments>,
}

impl Backbone {
    /// He-initialized convolutions, unit BN affine, small classifier.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.num_classes < 2 {
            return Err(Error::InvalidArgument("backbone needs ≥1 block and ≥2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut cin = config.in_channels;
        for &w in &config.widths {
            let fan_in = (cin * 9) as f32;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            blocks.push(ConvBlock {
                weight: Tensor::from_fn(vec![w, cin, 3, 3], |_| normal.sample(&mut rng)),
                gamma: Tensor::ones(vec![w]),
                beta: Tensor::zeros(vec![w]),
                running_mean: Tensor::zeros(vec![w]),
                running_var: Tensor::ones(vec![w]),
            });
            cin = w;
        }
        let f = config.feature_dim();
        let normal = Normal::new(0.0, (1.0 / f as f32).sqrt()).expect("valid std");
        let fc_weight = Tensor::from_fn(vec![f, config.num_classes], |_| normal.sample(&mut rng));
        let fc_bias = Tensor::zeros(vec![config.num_classes]);
        Ok(Self {
            config,
            blocks,
            fc_weight,
            fc_bias,
            clean_accuracy: None,
            frozen: false,
        })
    }

    pub fn ensure_frozen(&self, who: &str) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::NotFrozen(format!("{who} requires a frozen backbone")))
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.gamma.len() + b.beta.len())
            .sum::<usize>()
            + self.fc_weight.len()
            + self.fc_bias.len()
    }

    pub fn bind(&self, tape: &mut Tape, scope: ParamScope) -> BoundBackbone {
        let mut rec = |t: &Tensor, train: bool| if train { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let all = scope == ParamScope::All;
        let bn = scope != ParamScope::Frozen;
        let mut convs = Vec::new();
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        for b in &self.blocks {
            convs.push(rec(&b.weight, all));
            gammas.push(rec(&b.gamma, bn));
            betas.push(rec(&b.beta, bn));
        }
        let fc_w = rec(&self.fc_weight, all);
        let fc_b = rec(&self.fc_bias, all);
        BoundBackbone {
            convs,
            gammas,
            betas,
            fc_w,
            fc_b,
            scope,
        }
    }

    /// Mutable parameter slots in the order of [`BoundBackbone::trainable`].
    pub fn params_mut(&mut self, scope: ParamScope) -> Vec<&mut Tensor> {
        match scope {
            ParamScope::Frozen => Vec::new(),
            ParamScope::BnAffine => {
                let (mut gs, mut bs) = (Vec::new(), Vec::new());
                for b in self.blocks.iter_mut() {
                    gs.push(&mut b.gamma);
                    bs.push(&mut b.beta);
                }
                gs.extend(bs);
                gs
            }
            ParamScope::All => {
                let mut v = Vec::new();
                for b in self.blocks.iter_mut() {
                    v.push(&mut b.weight);
                    v.push(&mut b.gamma);
                    v.push(&mut b.beta);
                }
                v.push(&mut self.fc_weight);
                v.push(&mut self.fc_bias);
                v
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundBackbone, x: Var, mode: BnMode) -> Result<BackboneOutput> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(shape_err(
                "backbone",
                format!("expected N×{}×H×W input, got {shape:?}", self.config.in_channels),
            ));
        }
        let mut h = x;
        let mut moments = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            h = tape.conv2d(h, bound.convs[i], Padding::Zero)?;
            let stats = match mode {
                BnMode::Eval => BnStats::Fixed {
                    mean: b.running_mean.clone(),
                    var: b.running_var.clone(),
                },
                BnMode::Batch | BnMode::Train => BnStats::Batch,
            };
            let (y, m) = tape.batch_norm(h, bound.gammas[i], bound.betas[i], &stats)?;
            if let Some(m) = m {
                moments.push(m);
            }
            h = tape.relu(y);
            if self.config.pool_after.contains(&i) {
                h = tape.max_pool2(h)?;
            }
        }
        let features = tape.global_avg_pool(h)?;
        let z = tape.matmul(features, bound.fc_w)?;
        let logits = tape.add_bcast(z, bound.fc_b)?;
        Ok(BackboneOutput {
            features,
            logits,
            moments: if mode == BnMode::Train { moments } else { Vec::new() },
        })
    }

    /// Folds batch moments into running statistics (unbiased variance).
    pub fn absorb_moments(&mut self, moments: &[BatchMoments]) {
        let m = self.config.bn_momentum;
        for (b, mo) in self.blocks.iter_mut().zip(moments) {
            let corr = if mo.count > 1 {
                mo.count as f32 / (mo.count - 1) as f32
            } else {
                1.0
            };
            let mean: Vec<f32> = b
                .running_mean
                .data()
                .iter()
                .zip(&mo.mean)
                .map(|(&r, &x)| (1.0 - m) * r + m * x)
                .collect();
            let var: Vec<f32> = b
                .running_var
                .data()
                .iter()
                .zip(&mo.var)
                .map(|(&r, &x)| (1.0 - m) * r + m * x * corr)
                .collect();
            b.running_mean = Tensor::new(b.running_mean.shape().to_vec(), mean).expect("shape");
            b.running_var = Tensor::new(b.running_var.shape().to_vec(), var).expect("shape");
        }
    }

    /// Logits and argmax labels with the given normalization mode, in chunks.
    pub fn predict_with(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, Vec<usize>)> {
        let n = x.shape().first().copied().unwrap_or(0);
        let chunk = if mode == BnMode::Eval { 64 } else { n };
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, ParamScope::Frozen);
            let xv = tape.constant(x.slice_outer(start, end)?);
            let out = self.forward(&mut tape, &bound, xv, mode)?;
            parts.push(tape.value(out.logits).clone());
            start = end;
        }
        let logits = Tensor::concat_outer(&parts)?;
        let labels = argmax_rows(&logits);
        Ok((logits, labels))
    }

    /// Inference-mode prediction.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        self.predict_with(x, BnMode::Eval)
    }

    /// Penultimate features in inference mode.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, ParamScope::Frozen);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv, BnMode::Eval)?;
        Ok(tape.value(out.features).clone())
    }

    /// Every tensor including running statistics, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.weight"), &b.weight));
            v.push((format!("block{i}.gamma"), &b.gamma));
            v.push((format!("block{i}.beta"), &b.beta));
            v.push((format!("block{i}.running_mean"), &b.running_mean));
            v.push((format!("block{i}.running_var"), &b.running_var));
        }
        v.push(("fc.weight".into(), &self.fc_weight));
        v.push(("fc.bias".into(), &self.fc_bias));
        v
    }

    /// Bitwise comparison of every tensor, running statistics included.
    pub fn bit_eq(&self, other: &Backbone) -> bool {
        let (a, b) = (self.named_tensors(), other.named_tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
