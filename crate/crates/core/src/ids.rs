//! Identifier newtypes shared across the crate.
//!
//! Everything is a plain integer under the hood; the newtypes exist so a
//! writer id cannot be passed where a node id is expected. `Display` gives
//! each a short prefix for traces and index lines.

use serde::{Deserialize, Serialize};
use std::fmt;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// A submitted job. Ids are assigned in submission order.
    JobId, "j"
);
id_type!(
    /// A task slot in a stage (stable across re-executions of the task).
    TaskId, "t"
);
id_type!(
    /// A stage within a job DAG.
    StageId, "s"
);
id_type!(
    /// A producing (writer) task, stable across retries.
    WriterId, "w"
);
id_type!(
    /// One logical write stream. A fresh access point is minted for every
    /// writer attempt, so it changes across retries.
    AccessPoint, "ap"
);
id_type!(
    /// A cluster node; doubles as the address of the shuffle agent hosted there.
    NodeId, "n"
);

/// Partition number within a shuffle edge (dense, starting at 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionId(pub u32);

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Re-execution counter for a writer task; 0 is the first attempt.
pub type RetryIdx = u32;
