//! Config-driven experiment runs, guidance sweeps and CSV/SVG reporting.

mod config;
mod presets;
mod report;
mod run;

pub use config::{ExperimentConfig, RunManifest, Seeds};
pub use presets::{preset, Preset, PRESETS, SWEEP_SCALES};
pub use report::{emit_reports, read_metrics, render_svg, write_svg, MetricRow, MetricsWriter, CSV_HEADER};
pub use run::{
    eval_items, evaluate_saved, generate_data, load_run, read_report_rows, run_cfg_sweep, run_experiment,
    write_report_rows, DataSpec, ReportRow, RunSummary, BEST_CKPT, CURVES_SVG, EVAL_CSV, FINAL_CKPT, METRICS_CSV,
    RUN_MANIFEST, SWEEP_CSV,
};
