//! Experiment orchestration: configuration, multi-seed runs and result files.

mod config;
mod emit;
mod experiment;

pub use config::{parse_config, Cli, FaultInjection, RunConfig, SyntheticSpec};
pub use emit::{emit_results, SUMMARY_HEADER};
pub use experiment::{
    aggregate, build_stream, load_or_generate, run_experiment, run_seed, sub_seed, Aggregate, DiagRow, RunResult,
    SeedFailure, SeedOutcome, SeedResult, SeedSlot, Stat,
};
