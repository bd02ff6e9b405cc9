//! Small shared utilities: named RNG substreams and the flat key=value
//! config/metadata format used by checkpoints, sidecars and the CLI.

pub mod fsio;
pub mod kv;
pub mod rng;
