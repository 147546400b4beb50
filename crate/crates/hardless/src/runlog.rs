//! Append-only run event log.
//!
//! Every component reports state transitions here. The exporter assembles
//! per-invocation records from it, and the verification suites replay it to
//! audit scheduling invariants (warm-first, capacity, exactly-once) without
//! trusting the scheduler's own bookkeeping.

use crate::clock::TimeMs;
use crate::invocation::{Invocation, InvocationId};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimMode {
    Warm,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Evicted,
    Shutdown,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunEventKind {
    Published {
        invocation: Invocation,
    },
    PublishRejected {
        invocation: Invocation,
    },
    Claimed {
        id: InvocationId,
        node_id: String,
        mode: ClaimMode,
        config_key: String,
    },
    InstanceStarted {
        node_id: String,
        instance_id: String,
        accel_type: String,
        accel_local_id: String,
        config_key: String,
        cold_start_ms: u64,
    },
    InstanceIdle {
        node_id: String,
        instance_id: String,
    },
    InstanceBusy {
        node_id: String,
        instance_id: String,
        id: InvocationId,
    },
    ExecutionFinished {
        node_id: String,
        instance_id: String,
        accel_type: String,
        accel_local_id: String,
        id: InvocationId,
        e_start: TimeMs,
        e_end: TimeMs,
        ok: bool,
    },
    DispatchFailed {
        node_id: String,
        id: InvocationId,
        reason: String,
    },
    InstanceStopped {
        node_id: String,
        instance_id: String,
        reason: StopReason,
    },
    NoticeDelivered {
        id: InvocationId,
        ok: bool,
    },
    NodeJoined {
        node_id: String,
    },
    NodeDraining {
        node_id: String,
    },
    NodeStopped {
        node_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub t: TimeMs,
    #[serde(flatten)]
    pub kind: RunEventKind,
}

/// Shared, append-only event log. Cloning shares the underlying log.
#[derive(Clone, Default)]
pub struct RunLog {
    events: Arc<Mutex<Vec<RunEvent>>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, t: TimeMs, kind: RunEventKind) {
        let mut events = self.events.lock().unwrap();
        let seq = events.len() as u64;
        events.push(RunEvent { seq, t, kind });
    }

    /// Snapshot of all events so far, in append order.
    pub fn snapshot(&self) -> Vec<RunEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_in_append_order_with_seq() {
        let log = RunLog::new();
        log.record(5, RunEventKind::NodeJoined { node_id: "n0".into() });
        log.record(5, RunEventKind::NodeDraining { node_id: "n0".into() });
        let snap = log.snapshot();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap[0].seq, 0);
        assert_eq!(snap[1].seq, 1);
        assert!(matches!(snap[0].kind, RunEventKind::NodeJoined { .. }));
    }

    #[test]
    fn clones_share_the_log() {
        let log = RunLog::new();
        let log2 = log.clone();
        log.record(0, RunEventKind::NodeStopped { node_id: "n".into() });
        assert_eq!(log2.len(), 1);
    }
}
