//! Deterministic model of an external shuffle service for data-processing
//! clusters: adaptive in-memory/on-disk placement, agent grouping with
//! replica failover, watermark-driven memory management, adaptive backup
//! layout, and incremental recovery — all running on a discrete-event
//! cluster simulator with fault injection.

pub mod agent;
pub mod block;
pub mod checksum;
pub mod config;
pub mod grouping;
pub mod ids;
pub mod index;
pub mod job;
pub mod layout;
pub mod mode_select;
pub mod proxy;
pub mod reader;
pub mod sched;
pub mod sim;
