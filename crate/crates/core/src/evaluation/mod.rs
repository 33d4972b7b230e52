//! Detection metrics, latency benchmarking and feature-map export.

mod export;
mod latency;
mod metrics;

pub use export::{export_feature_maps, normalize_map, pseudocolor, FeatureSite};
pub use latency::{fps_from_ms, latency_bench, time_runs, LatencyReport, DEFAULT_RUNS, DEFAULT_WARMUP};
pub use metrics::{
    ap_from_flags, average_precision, coco_thresholds, interpolated_area, iou, iou_xyxy, map_at, map_summary, nms,
    per_class_ap, ClassAp, MapSummary,
};
