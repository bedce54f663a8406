//! CLI plumbing for the sparse variational GP engine: dataset and
//! checkpoint formats, run configuration, generators, and command bodies.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod font;
pub mod generate;
pub mod runconfig;
