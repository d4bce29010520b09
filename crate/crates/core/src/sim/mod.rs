//! Discrete-event cluster simulator: node/bandwidth model, fault injection,
//! workload generation, the shuffle engine itself, and metrics/trace output.

pub mod cluster;
pub mod engine;
pub mod fault;
pub mod metrics;
pub mod net;
pub mod trace;
pub mod workload;
