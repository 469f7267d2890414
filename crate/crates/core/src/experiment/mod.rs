//! Configuration and pipeline commands: simulate, fit, analyze, control,
//! report.

mod config;
mod report;
mod run;

pub use config::{
    ControlConfig, ControlInput, DataConfig, DictionaryConfig, EvaluationConfig, ExperimentConfig, Profile, Seeds, BENCHMARK_RIDGE,
    SimulateConfig,
};
pub use report::{render, REFERENCE_METRICS_FLAT, REFERENCE_METRICS_HIER, REFERENCE_RMS_FLAT, REFERENCE_RMS_HIER};
pub use run::{
    cmd_analyze, cmd_control, cmd_fit, cmd_report, cmd_simulate, load_models, ControlAggregate, ControlRecord,
    ControlSetup, ControlSummary, FitSummary, SimulateRecord, CONTROL_FILE, FIT_REPORT_FILE, MAX_FAILURE_FRACTION,
    METRICS_FILE, MODEL_FILE, REDUCED_FILE, REPORT_FILE,
};
