//! Region and boundary metrics, the synthetic moving-shapes generator, the
//! nearest-colour reference segmenter and report emission.

mod baseline;
mod metrics;
mod report;
mod synth;

pub use baseline::nearest_color_baseline;
pub use metrics::{
    boundary_f, boundary_pixels, default_tolerance, evaluate_sequence, jaccard, overall_score,
    MetricsReport, ObjectScores, DEFAULT_TOLERANCE_FRACTION,
};
pub use report::{format_metrics, format_table, write_metrics_report};
pub use synth::{
    benchmark_suite, bounce, static_suite, synth_generate, training_suite, Occluder, Shape, SuiteEntry, SynthObject,
    SynthOutput, SynthSpec, MIN_COLOR_GAP,
};
