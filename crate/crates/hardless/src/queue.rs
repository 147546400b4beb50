//! The shared invocation queue.
//!
//! Nodes join simply by consuming from here; there is no registration step.
//! Two claim shapes exist: `claim_matching` takes the oldest pending entry
//! whose runtime is in the caller's supported set (cold-start path), and
//! `claim_same_config` takes the oldest pending entry with an exact
//! configuration key (warm-reuse path). Claims are terminal — workers never
//! interact with the queue about an invocation again; completion flows back
//! to the client on a separate channel.

use crate::clock::TimeMs;
use crate::invocation::{Invocation, InvocationId, ScanItem};
use crate::ledger::LedgerField;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("invocation {0} was already published this run")]
    DuplicateInvocation(InvocationId),
    #[error("queue is full: capacity {0} pending entries")]
    QueueFull(usize),
}

/// Counter snapshot. Claims are terminal, so
/// `published_total == pending_count + claimed_count` at every instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub pending_count: usize,
    pub claimed_count: usize,
    pub published_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EntryState {
    Pending,
    Claimed,
}

#[derive(Debug)]
struct Entry {
    invocation: Invocation,
    config_key: String,
    enqueued_at: TimeMs,
    state: EntryState,
}

#[derive(Default)]
struct Inner {
    /// Entries by publish sequence; sequence order is also age order because
    /// all publishers share one clock.
    entries: BTreeMap<u64, Entry>,
    next_seq: u64,
    /// Pending-entry indexes for O(1) eligible lookup. Heads may be stale
    /// (already claimed) and are popped lazily.
    by_runtime: HashMap<String, VecDeque<u64>>,
    by_key: HashMap<String, VecDeque<u64>>,
    seen_ids: HashSet<InvocationId>,
    pending: usize,
    claimed: usize,
}

impl Inner {
    /// First pending sequence in a lazily-pruned index deque.
    fn peek_pending(entries: &BTreeMap<u64, Entry>, deque: &mut VecDeque<u64>) -> Option<u64> {
        while let Some(&seq) = deque.front() {
            match entries.get(&seq) {
                Some(e) if e.state == EntryState::Pending => return Some(seq),
                _ => {
                    deque.pop_front();
                }
            }
        }
        None
    }

    fn claim_seq(&mut self, seq: u64, t: TimeMs) -> Invocation {
        let entry = self.entries.get_mut(&seq).expect("claimed seq must exist");
        debug_assert_eq!(entry.state, EntryState::Pending);
        entry.state = EntryState::Claimed;
        self.pending -= 1;
        self.claimed += 1;
        let mut inv = entry.invocation.clone();
        // n_start never precedes r_start; claims follow publishes on the one
        // run clock, the max guards against scheduler stalls between reads.
        let n_start = inv.ledger.r_start.map_or(t, |r| r.max(t));
        inv.ledger
            .stamp(LedgerField::NStart, n_start)
            .expect("claim stamps n_start exactly once");
        inv
    }
}

/// Thread-safe shared queue. Claims are linearizable: one lock serializes
/// every state transition, so each entry is returned by at most one claim.
pub struct InvocationQueue {
    inner: Mutex<Inner>,
    capacity: Option<usize>,
}

impl InvocationQueue {
    /// Unbounded queue.
    pub fn new() -> Self {
        Self::with_capacity(None)
    }

    /// Queue rejecting publishes once `capacity` entries are pending.
    pub fn with_capacity(capacity: Option<usize>) -> Self {
        InvocationQueue {
            inner: Mutex::new(Inner::default()),
            capacity,
        }
    }

    /// Publish an invocation. The entry becomes visible to all subsequent
    /// scans and claims. Returns the entry sequence number.
    pub fn publish(&self, invocation: Invocation, t: TimeMs) -> Result<u64, QueueError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.seen_ids.contains(&invocation.id) {
            return Err(QueueError::DuplicateInvocation(invocation.id));
        }
        if let Some(cap) = self.capacity {
            if inner.pending >= cap {
                return Err(QueueError::QueueFull(cap));
            }
        }
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let key = invocation.config_key();
        inner.seen_ids.insert(invocation.id.clone());
        inner
            .by_runtime
            .entry(invocation.runtime_ref.clone())
            .or_default()
            .push_back(seq);
        inner.by_key.entry(key.clone()).or_default().push_back(seq);
        inner.entries.insert(
            seq,
            Entry {
                invocation,
                config_key: key,
                enqueued_at: t,
                state: EntryState::Pending,
            },
        );
        inner.pending += 1;
        Ok(seq)
    }

    /// Read-only snapshot of pending entries, oldest first. With a filter,
    /// only entries whose runtime is in the set are returned.
    pub fn scan(&self, filter: Option<&HashSet<String>>) -> Vec<ScanItem> {
        let inner = self.inner.lock().unwrap();
        let mut items: Vec<ScanItem> = inner
            .entries
            .values()
            .filter(|e| e.state == EntryState::Pending)
            .filter(|e| filter.is_none_or(|f| f.contains(&e.invocation.runtime_ref)))
            .map(|e| ScanItem {
                id: e.invocation.id.clone(),
                runtime_ref: e.invocation.runtime_ref.clone(),
                config_key: e.config_key.clone(),
                enqueued_at: e.enqueued_at,
            })
            .collect();
        // Sequence order already is publish order; make age order explicit.
        items.sort_by_key(|i| i.enqueued_at);
        items
    }

    /// Claim the oldest pending entry whose runtime is in `supported`,
    /// stamping `n_start` at `t`. Returns `None` when nothing is eligible.
    pub fn claim_matching(&self, supported: &HashSet<String>, t: TimeMs) -> Option<Invocation> {
        let mut inner = self.inner.lock().unwrap();
        let mut best: Option<(TimeMs, u64)> = None;
        // Renders deterministic by (enqueued_at, seq); seq breaks age ties.
        for rt in supported {
            let Some(mut deque) = inner.by_runtime.remove(rt) else {
                continue;
            };
            if let Some(seq) = Inner::peek_pending(&inner.entries, &mut deque) {
                let at = inner.entries[&seq].enqueued_at;
                if best.is_none_or(|(bat, bseq)| (at, seq) < (bat, bseq)) {
                    best = Some((at, seq));
                }
            }
            inner.by_runtime.insert(rt.clone(), deque);
        }
        best.map(|(_, seq)| inner.claim_seq(seq, t))
    }

    /// Claim the oldest pending entry with exactly this configuration key,
    /// stamping `n_start` at `t`.
    pub fn claim_same_config(&self, key: &str, t: TimeMs) -> Option<Invocation> {
        let mut inner = self.inner.lock().unwrap();
        let Some(mut deque) = inner.by_key.remove(key) else {
            return None;
        };
        let seq = Inner::peek_pending(&inner.entries, &mut deque);
        inner.by_key.insert(key.to_string(), deque);
        seq.map(|s| inner.claim_seq(s, t))
    }

    /// Consistent counter snapshot.
    pub fn stats(&self) -> QueueStats {
        let inner = self.inner.lock().unwrap();
        QueueStats {
            pending_count: inner.pending,
            claimed_count: inner.claimed,
            published_total: inner.pending + inner.claimed,
        }
    }
}

impl Default for InvocationQueue {
    fn default() -> Self {
        Self::new()
    }
}
