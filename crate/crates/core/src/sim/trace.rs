//! Run trace: a flat, replayable record of everything observable a run did.
//! Exported as newline-delimited JSON; the metrics accounting pass and the
//! audit oracles both consume this instead of engine internals.

use serde::{Deserialize, Serialize};

use crate::block::ShuffleMode;
use crate::ids::{JobId, NodeId, PartitionId, StageId, WriterId};
use crate::index::SourceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Writer,
    Reader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RerunReason {
    /// The node running the task disconnected.
    NodeLoss,
    /// A write could not be placed anywhere (fault tolerance off).
    WriteFailure,
    /// A fetch failed and no fallback exists (fault tolerance off).
    ReadFailure,
    /// Committed data was lost and a reader asked for regeneration.
    DataLoss,
    /// Incremental recovery gave up and escalated to a full rerun.
    RecoveryEscalation,
    /// Final checksum verification rejected the consumed set.
    VerificationFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    JobSubmit {
        t: f64,
        job: JobId,
        priority: i64,
        shuffle_bytes: u64,
    },
    JobDone {
        t: f64,
        job: JobId,
        completed: bool,
    },
    TaskStart {
        t: f64,
        job: JobId,
        stage: StageId,
        task: u32,
        attempt: u32,
        node: NodeId,
        kind: TaskKind,
    },
    TaskEnd {
        t: f64,
        job: JobId,
        stage: StageId,
        task: u32,
        attempt: u32,
        node: NodeId,
        kind: TaskKind,
        ok: bool,
    },
    Rerun {
        t: f64,
        job: JobId,
        stage: StageId,
        task: u32,
        attempt: u32,
        reason: RerunReason,
    },
    Commit {
        t: f64,
        job: JobId,
        node: NodeId,
        writer: WriterId,
        retry: u32,
        partition: PartitionId,
        seq: u32,
        bytes: u64,
        mode: ShuffleMode,
        source: SourceKind,
    },
    Fetch {
        t: f64,
        job: JobId,
        stage: StageId,
        task: u32,
        partition: PartitionId,
        source: SourceKind,
        node: NodeId,
        from_memory: bool,
        bytes: u64,
    },
    Spill {
        t: f64,
        node: NodeId,
        bytes: u64,
    },
    Discard {
        t: f64,
        node: NodeId,
        bytes: u64,
        survivable: bool,
    },
    AgentOom {
        t: f64,
        node: NodeId,
    },
    NodeDown {
        t: f64,
        node: NodeId,
    },
    NodeUp {
        t: f64,
        node: NodeId,
    },
    RecoveryStart {
        t: f64,
        job: JobId,
        partition: PartitionId,
        missing_writers: u32,
    },
    RecoveryEnd {
        t: f64,
        job: JobId,
        partition: PartitionId,
        outcome: RecoveryOutcome,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryOutcome {
    Complete,
    AbortedToFullRerun,
}

impl TraceEvent {
    pub fn time(&self) -> f64 {
        match self {
            TraceEvent::JobSubmit { t, .. }
            | TraceEvent::JobDone { t, .. }
            | TraceEvent::TaskStart { t, .. }
            | TraceEvent::TaskEnd { t, .. }
            | TraceEvent::Rerun { t, .. }
            | TraceEvent::Commit { t, .. }
            | TraceEvent::Fetch { t, .. }
            | TraceEvent::Spill { t, .. }
            | TraceEvent::Discard { t, .. }
            | TraceEvent::AgentOom { t, .. }
            | TraceEvent::NodeDown { t, .. }
            | TraceEvent::NodeUp { t, .. }
            | TraceEvent::RecoveryStart { t, .. }
            | TraceEvent::RecoveryEnd { t, .. } => *t,
        }
    }
}

/// Serialize a trace as newline-delimited JSON, one event per line.
pub fn to_ndjson(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

/// Parse a newline-delimited JSON trace; blank lines are skipped.
pub fn from_ndjson(text: &str) -> Result<Vec<TraceEvent>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trips() {
        let events = vec![
            TraceEvent::JobSubmit {
                t: 0.0,
                job: JobId(1),
                priority: 0,
                shuffle_bytes: 1024,
            },
            TraceEvent::NodeDown {
                t: 1.5,
                node: NodeId(3),
            },
            TraceEvent::JobDone {
                t: 9.25,
                job: JobId(1),
                completed: true,
            },
        ];
        let text = to_ndjson(&events);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"event":"job_submit""#));
        assert_eq!(from_ndjson(&text).unwrap(), events);
    }

    #[test]
    fn event_times_are_accessible() {
        let e = TraceEvent::Spill {
            t: 2.5,
            node: NodeId(0),
            bytes: 100,
        };
        assert_eq!(e.time(), 2.5);
    }
}
