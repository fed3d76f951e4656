//! Experiment driver for `gradfisher-core`: configuration, file formats and
//! the preset experiments behind the `gradfisher` binary.

pub mod config;
pub mod formats;
pub mod presets;

pub use config::{parse_config, ConfigError, ExperimentConfig, Overrides};
pub use presets::{run_preset, run_preset_with_threads, PresetOutput, RunError, PRESETS};
