//! Commands behind the `asvit` binary: training, benchmarking, kept-token
//! statistics, mask visualization and ablations. Every command writes a
//! `manifest.toml` next to its outputs.

pub mod ablate;
pub mod bench;
pub mod kept;
pub mod manifest;
pub mod netpbm;
pub mod parallel;
pub mod run;
pub mod stats;
pub mod train;
pub mod viz;

#[cfg(test)]
mod testutil;
