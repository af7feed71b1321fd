//! Single-shot multi-box detector with a cosine classifier.
mod anchors;
mod boxes;
mod eval;
mod loss;
mod model;

pub use anchors::{
    generate_anchors, hard_negative_mining, match_anchors, AnchorConfig, AnchorLevel, AnchorSet,
    GtBox, MatchResult, DEFAULT_NEG_POS_RATIO, DEFAULT_POS_THRESHOLD,
};
pub use boxes::{decode_box, encode_box, iou, BBox, VARIANCES};
pub use eval::{
    average_precision_11, detect, evaluate_map, nms, Detection, GroundTruth, MapReport,
};
pub use loss::{base_loss, regression_targets, BaseLoss, DEFAULT_ALPHA};
pub use model::{
    background_losses, cosine_logits, forward, head_names, predict, stage_names, AttentionMode,
    ClassLayout, Detector, DetectorConfig, Outputs, Prediction, CLASSIFIER,
};
