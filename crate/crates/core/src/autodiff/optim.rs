use std::borrow::BorrowMut;

use serde::{Deserialize, Serialize};

use super::Tensor;

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum UpdateRule {
    /// `θ ← θ − η·sign(g)` with `sign(0) = 0`.
    SignStep { step: f32 },
    /// Heavy-ball momentum with decoupled L2 weight decay folded into the gradient.
    SgdMomentum { lr: f32, momentum: f32, weight_decay: f32 },
}

#[inline]
pub fn sign0(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Stateful optimizer over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub rule: UpdateRule,
    velocity: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(rule: UpdateRule) -> Self {
        Self {
            rule,
            velocity: Vec::new(),
        }
    }

    /// Applies one update in place. `params` and `grads` are aligned by index.
    pub fn step<P: BorrowMut<Tensor>>(&mut self, params: &mut [P], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "params and grads must align");
        if params.is_empty() {
            return;
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.borrow().len()]).collect();
        }
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let p: &mut Tensor = p.borrow_mut();
            let mut data = p.to_vec();
            match self.rule {
                UpdateRule::SignStep { step } => {
                    for (x, &gv) in data.iter_mut().zip(g.data()) {
                        *x -= step * sign0(gv);
                    }
                }
                UpdateRule::SgdMomentum {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    for ((x, &gv), v) in data.iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        let gd = gv + weight_decay * *x;
                        *v = momentum * *v + gd;
                        *x -= lr * *v;
                    }
                }
            }
            *p = Tensor::new(p.shape().to_vec(), data).expect("same shape");
        }
    }

    /// Overrides the learning rate (sgd) or step (sign) for schedules.
    pub fn set_rate(&mut self, rate: f32) {
        match &mut self.rule {
            UpdateRule::SignStep { step } => *step = rate,
            UpdateRule::SgdMomentum { lr, .. } => *lr = rate,
        }
    }
}

/// Cosine-annealed rate at `step` of `total`.
pub fn cosine_rate(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}
