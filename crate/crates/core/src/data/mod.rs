//! Synthetic datasets and the binary tensor container.

pub mod checkpoint;
pub mod container;
pub mod synth;
