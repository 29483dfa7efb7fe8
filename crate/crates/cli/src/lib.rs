//! Command-line front end: configuration, checkpoints on disk and the
//! `synth-data` / `train` / `convert` / `eval` commands.

pub mod commands;
pub mod config;
