//! Evaluation metrics: panoptic quality with thing/stuff splits, mean IoU,
//! average recall of ranked proposals, and COCO-style mask mAP. All
//! dataset-level numbers come from mergeable per-image accumulators.

pub mod instance;
pub mod panoptic;
pub mod report;
pub mod semantic;

pub use instance::{
    average_recall, iou_thresholds, mask_iou, mask_map, Detection, GtInstance, RecallAccumulator,
};
pub use panoptic::{panoptic_quality, CategoryStats, PQAccumulator, PQResult};
pub use report::{CategoryRow, MetricReport};
pub use semantic::{mean_iou, IoUAccumulator};
