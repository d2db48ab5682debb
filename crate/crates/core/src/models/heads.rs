use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Two-layer perceptron `in → hidden → out` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct BoundMlp {
    vars: [Var; 4],
    trainable: bool,
}

impl BoundMlp {
    pub fn trainable(&self) -> Vec<Var> {
        if self.trainable {
            self.vars.to_vec()
        } else {
            Vec::new()
        }
    }
}

impl Mlp {
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            Tensor::from_fn(vec![fan_in, fan_out], |_| normal.sample(&mut rng))
        };
        let w1 = layer(dims[0], dims[1]);
        let w2 = layer(dims[1], dims[2]);
        Self {
            w1,
            b1: Tensor::zeros(vec![dims[1]]),
            w2,
            b2: Tensor::zeros(vec![dims[2]]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut rec = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            vars: [rec(&self.w1), rec(&self.b1), rec(&self.w2), rec(&self.b2)],
            trainable,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = bound.vars;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bcast(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_bcast(o, b2)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn bit_eq(&self, other: &Mlp) -> bool {
        self.w1.bit_eq(&other.w1) && self.b1.bit_eq(&other.b1) && self.w2.bit_eq(&other.w2) && self.b2.bit_eq(&other.b2)
    }
}

/// Contrastive projection head; embeddings are unit-normalized.
#[derive(Clone, Debug)]
pub struct SslHead {
    pub mlp: Mlp,
    pub tau: f32,
}

impl SslHead {
    pub const HIDDEN: usize = 128;
    pub const EMBED: usize = 64;
    pub const DEFAULT_TAU: f32 = 0.5;

    pub fn new(feature_dim: usize, seed: u64) -> Self {
        Self {
            mlp: Mlp::new([feature_dim, Self::HIDDEN, Self::EMBED], seed),
            tau: Self::DEFAULT_TAU,
        }
    }

    pub fn embed(&self, tape: &mut Tape, bound: &BoundMlp, features: Var) -> Result<Var> {
        let z = self.mlp.forward(tape, bound, features)?;
        tape.l2_normalize(z)
    }
}

/// Predicts which of the four quarter-turns was applied to an image.
#[derive(Clone, Debug)]
pub struct RotationHead {
    pub mlp: Mlp,
}

impl RotationHead {
    pub const HIDDEN: usize = 64;

    pub fn new(feature_dim: usize, seed: u64) -> Self {
        Self {
            mlp: Mlp::new([feature_dim, Self::HIDDEN, 4], seed),
        }
    }
}
