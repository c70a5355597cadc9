//! Experiment harness: layered configuration, shipped presets, seeded runs,
//! JSONL metric streams and CSV summaries.

pub mod config;
pub mod presets;
pub mod runner;

pub use config::{load_config, load_layered, load_preset, parse_config_str, ConfigError, RunConfig};
pub use runner::{
    emit_summary, execute, exit_code, parse_record_line, read_summary, run_experiment, RunError, RunOutput,
    StreamRecord, SummaryRow, SCHEMA_VERSION,
};
