//! Experiment orchestration: configuration, run records, plans, ablation
//! sweeps and table/plot emission.

pub mod config;
pub mod experiments;
pub mod plan;
pub mod plot;
pub mod record;

pub use config::RunConfig;
pub use plan::{ExperimentPlan, PlanEntry, PlanRunner, TargetSource};
pub use record::{FinalMetrics, PairMetrics, RunRecord};
