//! Classifier backbone, self-supervised heads and their training loops.

mod augment;
mod backbone;
mod heads;
mod objective;
mod train;

pub use augment::{augment_views, jitter_plan, pair_indicator, AugmentConfig, ContrastiveBatch, ViewParams, ViewPlan};
pub use backbone::{argmax_rows, Backbone, BackboneConfig, BackboneOutput, BnMode, BoundBackbone, ConvBlock, ParamScope};
pub use heads::{BoundMlp, Mlp, RotationHead, SslHead};
pub use objective::{
    contrastive_loss, entropy, entropy_of, marginal_entropy, quarter_turn, rotation_loss, rotation_plan, Objective, SslTask,
};
pub use train::{train_backbone, train_rotation_head, train_ssl_head, SslConfig, TrainHyper, TrainedBackbone, TrainedHead};
