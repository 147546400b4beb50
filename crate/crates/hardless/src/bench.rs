//! Benchmark client: phased open-loop load generation, completion
//! listening, and timeout accounting.
//!
//! Arrivals are computed up front from (scenario, seed) alone, so the
//! offered load never depends on how fast the system drains — overload shows
//! up as queue growth, not reduced input. Each published invocation either
//! completes (Success/Failure notice) or is written off as TimedOut when no
//! notice arrives within `invocation_timeout_ms` of its publish.

use crate::clock::TimeMs;
use crate::invocation::{Invocation, InvocationId, RunConfig};
use crate::ledger::LedgerField;
use crate::node::{CompletionNotice, NodeConfig, NoticeStatus};
use crate::runtime::{stable_seed, BackendProfile};
use crate::store::FetchLatencyModel;
use crate::invocation::RuntimeSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Reply-channel address used by the benchmark client.
pub const BENCH_REPLY_ADDR: &str = "bench/client";

/// One load phase: run at `target_trps` offered invocations per second for
/// `duration_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPhase {
    pub label: String,
    pub duration_ms: u64,
    pub target_trps: f64,
}

fn default_timeout_ms() -> u64 {
    120_000
}

fn default_dataset_size() -> u64 {
    1024
}

fn default_sample_period() -> u64 {
    1000
}

/// Node entry in a scenario: the node configuration plus optional timed
/// membership (joining late, leaving early).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNode {
    #[serde(flatten)]
    pub config: NodeConfig,
    #[serde(default)]
    pub join_at_ms: u64,
    #[serde(default)]
    pub leave_at_ms: Option<u64>,
}

/// A complete, self-contained experiment description. This is the on-disk
/// scenario JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub phases: Vec<WorkloadPhase>,
    pub runtime_ref: String,
    pub dataset_ref: String,
    #[serde(default)]
    pub run_config: RunConfig,
    #[serde(default = "default_timeout_ms")]
    pub invocation_timeout_ms: u64,
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<ScenarioNode>,
    /// Runtime catalog for this run.
    pub runtimes: Vec<RuntimeSpec>,
    /// Latency/fault models per simulated accelerator type.
    #[serde(default)]
    pub profiles: Vec<BackendProfile>,
    #[serde(default)]
    pub store: FetchLatencyModel,
    /// Pending-entry bound; absent means unbounded.
    #[serde(default)]
    pub queue_capacity: Option<usize>,
    /// Synthetic dataset size seeded into the store when the configured
    /// dataset_ref is absent.
    #[serde(default = "default_dataset_size")]
    pub dataset_size_bytes: u64,
    /// Draw inter-arrival gaps from an exponential distribution instead of
    /// the fixed schedule. Default off.
    #[serde(default)]
    pub poisson_arrivals: bool,
    #[serde(default = "default_sample_period")]
    pub sample_period_ms: u64,
    /// Executable to load as the runtime artifact in real-time mode, path
    /// relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_file: Option<String>,
}

/// A validation finding: which field, and what is wrong with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read scenario {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("scenario {}: {e}", path.display()))
    }

    pub fn profile_for(&self, accel_type: &str) -> Option<&BackendProfile> {
        self.profiles.iter().find(|p| p.accel_type == accel_type)
    }

    /// Fill per-type cold-start gaps in runtime specs from the accelerator
    /// profiles, so every supported type has a cold-start duration.
    pub fn resolve(&mut self) {
        for rt in &mut self.runtimes {
            for t in rt.supported_accelerator_types.clone() {
                if !rt.cold_start_ms.contains_key(&t) {
                    if let Some(p) = self.profiles.iter().find(|p| p.accel_type == t) {
                        rt.cold_start_ms.insert(t, p.cold_start_ms);
                    }
                }
            }
        }
    }

    /// Cross-field consistency report. Empty means runnable.
    pub fn validate(&self) -> Vec<Finding> {
        let mut findings = Vec::new();
        let mut push = |field: &str, message: String| {
            findings.push(Finding { field: field.to_string(), message });
        };

        if self.phases.is_empty() {
            push("phases", "at least one workload phase is required".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.duration_ms == 0 {
                push(&format!("phases[{i}].duration_ms"), "must be > 0".into());
            }
            if !p.target_trps.is_finite() || p.target_trps < 0.0 {
                push(
                    &format!("phases[{i}].target_trps"),
                    format!("must be finite and >= 0, got {}", p.target_trps),
                );
            }
        }
        if self.invocation_timeout_ms == 0 {
            push("invocation_timeout_ms", "must be > 0".into());
        }
        if self.runtime_ref.is_empty() {
            push("runtime_ref", "must be non-empty".into());
        }
        if self.dataset_ref.is_empty() {
            push("dataset_ref", "must be non-empty".into());
        }
        if self.sample_period_ms == 0 {
            push("sample_period_ms", "must be > 0".into());
        }

        let mut specs: HashMap<String, RuntimeSpec> = HashMap::new();
        for (i, rt) in self.runtimes.iter().enumerate() {
            if specs.insert(rt.id.clone(), rt.clone()).is_some() {
                push(&format!("runtimes[{i}].id"), format!("duplicate runtime id {}", rt.id));
            }
            let mut resolved = rt.clone();
            for t in &rt.supported_accelerator_types {
                if !resolved.cold_start_ms.contains_key(t) {
                    if let Some(p) = self.profile_for(t) {
                        resolved.cold_start_ms.insert(t.clone(), p.cold_start_ms);
                    }
                }
            }
            if let Err(e) = resolved.validate() {
                push(&format!("runtimes[{i}]"), e.to_string());
            }
        }
        if !specs.contains_key(&self.runtime_ref) {
            push("runtime_ref", format!("runtime {} is not defined in runtimes", self.runtime_ref));
        }

        for (i, p) in self.profiles.iter().enumerate() {
            if p.exec_median_ms == 0 {
                push(&format!("profiles[{i}].exec_median_ms"), "must be > 0".into());
            }
            if !(0.0..=1.0).contains(&p.fault_rate) {
                push(&format!("profiles[{i}].fault_rate"), "must be within [0, 1]".into());
            }
            if p.jitter < 0.0 || !p.jitter.is_finite() {
                push(&format!("profiles[{i}].jitter"), "must be finite and >= 0".into());
            }
        }

        if self.nodes.is_empty() {
            push("nodes", "at least one node is required".into());
        }
        let mut node_ids = std::collections::HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !node_ids.insert(n.config.node_id.clone()) {
                push(&format!("nodes[{i}].node_id"), format!("duplicate node id {}", n.config.node_id));
            }
            if let Err(e) = n.config.validate(&specs) {
                push(&format!("nodes[{i}]"), e.to_string());
            }
            for acc in &n.config.accelerators {
                if self.profile_for(&acc.accel_type).is_none() {
                    push(
                        &format!("nodes[{i}].accelerators"),
                        format!("no backend profile for accelerator type {}", acc.accel_type),
                    );
                }
            }
            if let Some(leave) = n.leave_at_ms {
                if leave <= n.join_at_ms {
                    push(
                        &format!("nodes[{i}].leave_at_ms"),
                        format!("leave ({leave}) must be after join ({})", n.join_at_ms),
                    );
                }
            }
        }

        // The scenario's workload must be executable somewhere.
        if let Some(spec) = specs.get(&self.runtime_ref) {
            let any_node_supports = self.nodes.iter().any(|n| {
                n.config.runtimes.contains(&self.runtime_ref)
                    && n.config.accelerators.iter().any(|a| spec.supports(&a.accel_type))
            });
            if !self.nodes.is_empty() && !any_node_supports {
                push(
                    "nodes",
                    format!("no node can execute runtime {}", self.runtime_ref),
                );
            }
        }
        findings
    }

    /// Total run horizon of the arrival phases.
    pub fn phases_end_ms(&self) -> TimeMs {
        self.phases.iter().map(|p| p.duration_ms).sum()
    }
}

/// Absolute publish times for the whole run, derived from the scenario and
/// seed only.
pub fn arrival_schedule(scenario: &Scenario) -> Vec<TimeMs> {
    let mut times = Vec::new();
    let mut phase_start: u64 = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
        &scenario.seed.to_string(),
        "arrivals",
    ]));
    for phase in &scenario.phases {
        if phase.target_trps > 0.0 {
            if scenario.poisson_arrivals {
                let exp = Exp::new(phase.target_trps / 1000.0).expect("positive rate");
                let mut t = 0.0f64;
                loop {
                    t += exp.sample(&mut rng);
                    if t >= phase.duration_ms as f64 {
                        break;
                    }
                    times.push(phase_start + t as u64);
                }
            } else {
                let count = (phase.duration_ms as f64 * phase.target_trps / 1000.0).floor() as u64;
                let interval = 1000.0 / phase.target_trps;
                for i in 0..count {
                    times.push(phase_start + (i as f64 * interval).round() as u64);
                }
            }
        }
        phase_start += phase.duration_ms;
    }
    times
}

/// Build the `index`-th invocation of a run.
pub fn make_invocation(scenario: &Scenario, index: u64) -> Invocation {
    Invocation {
        id: InvocationId::new(format!("inv-{index:06}")),
        runtime_ref: scenario.runtime_ref.clone(),
        dataset_ref: scenario.dataset_ref.clone(),
        run_config: scenario.run_config.clone(),
        reply_to: BENCH_REPLY_ADDR.to_string(),
        ledger: Default::default(),
    }
}

/// Final disposition of one published invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Success,
    Failure,
    TimedOut,
    Rejected,
}

impl OutcomeStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeStatus::Success => "success",
            OutcomeStatus::Failure => "failure",
            OutcomeStatus::TimedOut => "timed_out",
            OutcomeStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutcomeRecord {
    pub status: OutcomeStatus,
    pub r_end: Option<TimeMs>,
    pub failure_reason: Option<String>,
    /// Node-side stamps, also kept for notices that arrive after the client
    /// already wrote the invocation off.
    pub notice: Option<CompletionNotice>,
}

#[derive(Debug, Clone)]
struct PublishedEntry {
    r_start: TimeMs,
    timeout_at: TimeMs,
}

/// Client-side accounting: publishes, notices, timeouts. The conservation
/// identity `published == success + failure + timed_out + rejected` holds at
/// end of run by construction and is asserted by the verification suite.
#[derive(Default)]
pub struct CompletionTracker {
    published: HashMap<InvocationId, PublishedEntry>,
    order: Vec<InvocationId>,
    outcomes: HashMap<InvocationId, OutcomeRecord>,
    success_times: Vec<TimeMs>,
    notices_received: usize,
    attempts: usize,
}

impl CompletionTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_published(&mut self, id: InvocationId, r_start: TimeMs, timeout_ms: u64) {
        self.attempts += 1;
        self.order.push(id.clone());
        self.published.insert(
            id,
            PublishedEntry { r_start, timeout_at: r_start + timeout_ms },
        );
    }

    pub fn record_rejected(&mut self, id: InvocationId) {
        self.attempts += 1;
        self.order.push(id.clone());
        self.outcomes.insert(
            id,
            OutcomeRecord {
                status: OutcomeStatus::Rejected,
                r_end: None,
                failure_reason: Some("queue full".into()),
                notice: None,
            },
        );
    }

    /// A completion notice arrived at time `t`. Returns true when this
    /// resolved the invocation (false for duplicates or post-timeout
    /// stragglers, whose node-side stamps are still kept for the record).
    pub fn on_notice(&mut self, notice: CompletionNotice, t: TimeMs) -> bool {
        self.notices_received += 1;
        let id = notice.invocation_id.clone();
        if let Some(existing) = self.outcomes.get_mut(&id) {
            if existing.notice.is_none() {
                existing.notice = Some(notice);
            }
            return false;
        }
        if !self.published.contains_key(&id) {
            return false; // notice for an invocation we never published
        }
        let (status, failure_reason) = match &notice.status {
            NoticeStatus::Success => (OutcomeStatus::Success, None),
            NoticeStatus::Failure(reason) => (OutcomeStatus::Failure, Some(reason.clone())),
        };
        if status == OutcomeStatus::Success {
            self.success_times.push(t);
        }
        self.outcomes.insert(
            id,
            OutcomeRecord { status, r_end: Some(t), failure_reason, notice: Some(notice) },
        );
        true
    }

    /// Resolve one invocation as timed out if it is still open and its
    /// deadline has passed.
    pub fn timeout_check(&mut self, id: &InvocationId, now: TimeMs) -> bool {
        if self.outcomes.contains_key(id) {
            return false;
        }
        let Some(entry) = self.published.get(id) else {
            return false;
        };
        if now < entry.timeout_at {
            return false;
        }
        self.outcomes.insert(
            id.clone(),
            OutcomeRecord {
                status: OutcomeStatus::TimedOut,
                r_end: None,
                failure_reason: Some("no completion within timeout".into()),
                notice: None,
            },
        );
        true
    }

    /// Sweep every open invocation against `now` (real-time driver path).
    pub fn expire_timeouts(&mut self, now: TimeMs) -> usize {
        let due: Vec<InvocationId> = self
            .published
            .iter()
            .filter(|(id, e)| now >= e.timeout_at && !self.outcomes.contains_key(*id))
            .map(|(id, _)| id.clone())
            .collect();
        let n = due.len();
        for id in due {
            self.timeout_check(&id, now);
        }
        n
    }

    pub fn all_resolved(&self) -> bool {
        self.outcomes.len() == self.attempts
    }

    pub fn attempts(&self) -> usize {
        self.attempts
    }

    pub fn notices_received(&self) -> usize {
        self.notices_received
    }

    pub fn r_start_of(&self, id: &InvocationId) -> Option<TimeMs> {
        self.published.get(id).map(|e| e.r_start)
    }

    pub fn outcome_of(&self, id: &InvocationId) -> Option<&OutcomeRecord> {
        self.outcomes.get(id)
    }

    /// Publish order of all attempts.
    pub fn ids_in_order(&self) -> &[InvocationId] {
        &self.order
    }

    /// Completion times of successful invocations, ascending.
    pub fn success_times(&self) -> Vec<TimeMs> {
        let mut ts = self.success_times.clone();
        ts.sort_unstable();
        ts
    }

    pub fn counts(&self) -> OutcomeCounts {
        let mut c = OutcomeCounts { published: self.attempts, ..Default::default() };
        for o in self.outcomes.values() {
            match o.status {
                OutcomeStatus::Success => c.success += 1,
                OutcomeStatus::Failure => c.failure += 1,
                OutcomeStatus::TimedOut => c.timed_out += 1,
                OutcomeStatus::Rejected => c.rejected += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OutcomeCounts {
    pub published: usize,
    pub success: usize,
    pub failure: usize,
    pub timed_out: usize,
    pub rejected: usize,
}

impl OutcomeCounts {
    /// `published == success + failure + timed_out + rejected`.
    pub fn conserved(&self) -> bool {
        self.published == self.success + self.failure + self.timed_out + self.rejected
    }
}
