//! Experiment configuration, orchestration, manifests, reports and plots.

mod config;
mod plot;
mod report;
mod run;
mod sweep;

pub use config::{
    CorruptionStep, DatasetSpec, ExperimentConfig, Method, OuterSettings, ShiftSpec, SynthSpec, OUTPUT_ROOT_ENV,
};
pub use plot::line_chart;
pub use report::{report_tables, write_tables, Table, Tables};
pub use run::{peak_memory_kib, run_experiment, write_atomic, RunManifest, SeedResult, CODE_VERSION};
pub use sweep::{apply as apply_sweep, sweep, SweepOutcome, SweepParam, SweepPoint};
