//! Experiment harness: configuration, the online training loop, the
//! baselines, evaluation and reporting.

mod config;
mod learner;
mod report;
mod run;
mod tune;

pub use config::{ExperimentConfig, Method};
pub use learner::{make_learner, Baseline, Learner, OnlineLora, StepLog};
pub use report::{build_report, line_chart, report, Marker, ReportFiles, Series};
pub use run::{
    evaluate, format_events_csv, format_matrix_csv, format_steps_csv, format_trace_csv, load_checkpoint,
    load_record, run_experiment, run_id, run_stream, stream_for_seed, train, train_baseline, train_online_lora,
    write_run, MergeCheck, RunRecord, StepRow, STEPS_HEADER,
};
pub use tune::tune_thresholds;
