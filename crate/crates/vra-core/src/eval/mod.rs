//! Experiment orchestration: configuration, the attack-evaluation harness
//! with budget replay, and report emission.

pub mod config;
pub mod harness;
pub mod report;

pub use config::{AttackSpec, SweepConfig};
pub use harness::{
    run_attack_on_set, run_budget_sweep, run_budget_sweep_on, run_overlap_experiment,
    AttackRecords, ClipRecord, OverlapOutcome, OverlapRow, SweepOutcome,
};
pub use report::{emit_report, parse_results_csv, EmittedFiles};
