//! Experiment harness: configuration, cached artifacts, experiment runners
//! and report emission.

pub mod config;
pub mod experiments;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, ExperimentId, Overrides, PolicyName};
pub use experiments::{run_ablation, run_crossdomain, run_eval, run_experiment, run_main, run_routing, run_sweep, Sweep, System};
pub use pipeline::Pipeline;
pub use report::{emit_report, load_report, Report, Table};
