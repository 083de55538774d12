//! Experiment harness: configuration, statistics, orchestration and reports.

pub mod config;
pub mod experiment;
pub mod report;
pub mod selftest;
pub mod stats;

pub use config::{ExperimentConfig, Scenario};
pub use experiment::{
    run_constraint_experiment, run_cost_experiment, Metric, ScenarioStats, SeriesRecord,
};
pub use report::emit_report;
pub use selftest::jacobian_selftest;
pub use stats::{wilcoxon_signed_rank, wilcoxon_signed_rank_using, Sidedness, WilcoxonMethod, WilcoxonResult};
