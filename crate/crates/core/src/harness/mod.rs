//! Configuration, experiment orchestration, run comparison and grids.

pub mod compare;
pub mod config;
pub mod grid;
pub mod run;

pub use compare::{compare_runs, Comparison};
pub use config::{ExperimentConfig, Strategy};
pub use grid::{expand, preset, run_grid, GridRow};
pub use run::{decode_run, evaluate_run, load_or_generate, read_report, run_experiment, run_experiment_on, RunReport};
