//! Named experiments: configuration, execution and CSV output.

pub mod config;
pub mod grid;
pub mod runner;
pub mod table;

pub use config::{load_config, validate_config, Experiment, ExperimentConfig, SftSolver, TrainCovariance};
pub use runner::run_experiment;
pub use table::{schema, Cell, Table};
