//! Numeric substrate: dense tensors, a reverse-mode differentiation record,
//! image kernels, a small-matrix SVD and first-order optimizers.

pub mod gradcheck;
mod kernels;
pub mod optim;
mod resample;
pub mod svd;
mod tape;
mod tensor;

pub use optim::{cosine_rate, sign0, Optimizer, UpdateRule};
pub use resample::{Affine, ResamplePlan};
pub use svd::{svd_small, FactorTriple};
pub use tape::{BatchMoments, BnStats, Gradients, Padding, Tape, Var, BN_EPS};
pub use tensor::Tensor;
