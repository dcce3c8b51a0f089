//! Detection scoring: matching, miss rate versus FPPI, log-average miss
//! rate, shift sweeps and directional robustness metrics.

mod matching;
mod mr;
mod report;
mod sweep;

pub use matching::{match_frame, DetOutcome, FrameMatch, MATCH_IOU};
pub use mr::{
    fppi_sample_points, ground_truth, log_average_miss_rate, mr_score, EvalCurve, MrResult, MrValue,
    FPPI_SAMPLES, MISS_RATE_FLOOR,
};
pub use report::{emit_report, DirectionsBlock, Report, ReportFormat, CSV_HEADER, REPORT_SCHEMA};
pub use sweep::{
    direction_metrics, direction_modes, shift_frame, shift_grid_sweep, shift_grid_sweep_multi,
    translate_image, Detector, DirectionMetrics, DirectionStat, GridEntry, MultiDetector, ShiftSet,
    SweepResult, DIRECTIONS, DIRECTION_RADIUS,
};
