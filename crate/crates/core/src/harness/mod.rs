//! Data handling and experiment orchestration around the network core.

pub mod analysis;
pub mod dataset;
pub mod experiment;
pub mod idx;
pub mod synth;
