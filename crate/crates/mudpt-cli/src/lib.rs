//! Batch experiment orchestration on top of the `mudpt` library: validated
//! configs, the four evaluation protocols, accuracy/mean metrics, and
//! deterministic report files.
//!
//! The binary in this crate exposes the same machinery as subcommands; the
//! library split exists so integration tests can drive full runs in-process.

pub mod config;
pub mod metrics;
pub mod runner;
