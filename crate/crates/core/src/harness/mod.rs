//! Experiment orchestration: run configuration, the training loop, sweeps
//! and metric/probe correlation.

mod config;
mod correlate;
mod sweep;
mod train;

pub use config::{
    BackendKind, DataConfig, EncoderConfig, EvalConfig, InitMode, OptimConfig, PrototypeConfig,
    Reduction, RunConfig, Schedule, Seeds,
};
pub use correlate::{correlate, kendall_tau_b, r_squared, CorrelationReport, MetricCorrelation, MIN_ROWS};
pub use sweep::{
    read_sweep_csv, sweep, write_sweep_csv, GroupSummary, SweepAxis, SweepFailure, SweepGrid,
    SweepOutcome, SweepRow, SweepSummary,
};
pub use train::{
    check_bound, dataset, eval_views, initial_params, read_record, run, train, write_outputs,
    BoundSummary, EpochLog, EvalViews, RunRecord, TrainOutcome, PARAMS_FILE, RECORD_FILE,
};
