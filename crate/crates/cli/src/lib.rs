//! Experiment runner for `mfg-noise-lab`: configs, presets, pipelines and
//! assumption checks behind the `mfg-noise-lab` binary.

pub mod config;
pub mod output;
pub mod pipeline;
pub mod presets;
pub mod validate;
