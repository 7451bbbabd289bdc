//! Classification AUC, CAM-to-box conversion and localization scoring.

mod boxes;
mod localize;
mod metrics;
pub mod render;
mod report;
mod run;

pub use boxes::{extract_boxes, heatmap_to_mask, iou, normalize_heatmap, resize_bilinear, BBox};
pub use localize::{localization_score, LocCase, LocRow, DEFAULT_IOU_THRESHOLDS};
pub use metrics::{mean_defined, per_class_auc, roc_auc};
pub use report::EvalReport;
pub use run::{boxed_indices, check_model_inputs, model_input, Evaluator, Predictions};
