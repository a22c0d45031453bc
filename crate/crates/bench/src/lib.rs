//! Benchmark driver for lazyflow graphs.
//!
//! A run is described by a TOML file ([`parse_config`]), turned into an
//! executable graph ([`build_graph`]), evaluated for a number of iterations
//! with selected variables perturbed between them ([`run`]) and summarized in
//! a [`RunReport`] that serializes deterministically ([`emit_report`]).

pub mod build;
pub mod config;
pub mod report;
pub mod run;

pub use build::{arena_config, build_builtin_oscprob, build_chain, build_custom, build_graph, BuildError, BuiltGraph};
pub use config::{
    device_disabled_by_env, load_config, parse_config, ConfigError, Energies, GraphConfig, ParseError, ReportFormat,
    RunConfig, ValidationError, DISABLE_DEVICE_ENV,
};
pub use report::{
    emit_report, Checksum, Comparison, Event, IterationRecord, RunReport, Status, Totals, SCHEMA_VERSION,
};
pub use run::{checksum, max_relative_difference, run, run_comparison, run_with_device, RunError, RunOutput};

/// Process exit codes used by the command-line tool.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DEVICE_FAULT: i32 = 3;
}
