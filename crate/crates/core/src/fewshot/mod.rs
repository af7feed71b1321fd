//! The novel stage: concentration and distillation losses, imprinting,
//! support sampling, and the two training drivers.
mod imprint;
mod losses;
mod support;
mod train;

pub use imprint::{best_anchor, imprint_row, init_novel_detector};
pub use losses::{
    background_concentration_loss, combine_novel_loss, distillation_loss, novel_loss,
    object_concentration_loss, Hyperparams, NovelLoss,
};
pub use support::{sample_support_set, SupportSet};
pub use train::{
    evaluate, ground_truth, positive_cosine, run_detector, scene_targets, train_base, train_novel,
    EpochMetrics, EvalReport, TrainConfig,
};
